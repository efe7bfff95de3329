//! Disaggregated annotation corpora: label space, annotators and their
//! demographic groups, per-annotator labels and the majority-vote gold maps
//! derived from them.
//!
//! Corpora enter through [`load_corpus`] (two CSV files) or through
//! [`AnnotationCorpus::build`] for in-memory construction. Both apply the
//! same filtering: annotators below `min_annotations` are dropped with all
//! their labels, texts left without labels are dropped, and gold / group gold
//! are recomputed on what remains.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`LabelSpace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelId(pub usize);

/// Ordered set of label identifiers. Probability vectors index into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
    /// The non-harmful class, used to break majority-vote ties.
    negative: Option<LabelId>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(labels: Vec<S>, negative: Option<&str>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::InvalidConfig("label space is empty".into()));
        }
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "label space has duplicate identifiers: {labels:?}"
            )));
        }
        let negative = match negative {
            Some(name) => Some(LabelId(
                labels
                    .iter()
                    .position(|l| l == name)
                    .ok_or_else(|| Error::UnknownLabel(name.to_string()))?,
            )),
            None => None,
        };
        Ok(Self { labels, negative })
    }

    /// `(hate, not_hate)` with `not_hate` as the negative class.
    pub fn hate_speech() -> Self {
        Self {
            labels: vec!["hate".into(), "not_hate".into()],
            negative: Some(LabelId(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.labels.iter().position(|l| l == name).map(LabelId)
    }

    pub fn parse(&self, name: &str) -> Result<LabelId> {
        self.id(name).ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.labels[id.0]
    }

    pub fn contains(&self, id: LabelId) -> bool {
        id.0 < self.labels.len()
    }

    pub fn negative(&self) -> Option<LabelId> {
        self.negative
    }

    /// The class scored by binary-positive F1: the first label that is not
    /// the negative class.
    pub fn positive(&self) -> LabelId {
        (0..self.labels.len())
            .map(LabelId)
            .find(|id| Some(*id) != self.negative)
            .unwrap_or(LabelId(0))
    }

    pub fn ids(&self) -> impl Iterator<Item = LabelId> {
        (0..self.labels.len()).map(LabelId)
    }
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self::hate_speech()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Other,
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" => Ok(Gender::Male),
            "female" => Ok(Gender::Female),
            "other" | "" => Ok(Gender::Other),
            other => Err(format!(
                "gender `{other}` is not one of male, female, other"
            )),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Other => "other",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    White,
    NonWhite,
    Other,
}

impl FromStr for Ethnicity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "white" => Ok(Ethnicity::White),
            "non_white" => Ok(Ethnicity::NonWhite),
            "other" => Ok(Ethnicity::Other),
            other => Err(format!(
                "ethnicity class `{other}` is not one of white, non_white, other"
            )),
        }
    }
}

impl fmt::Display for Ethnicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ethnicity::White => "white",
            Ethnicity::NonWhite => "non_white",
            Ethnicity::Other => "other",
        })
    }
}

/// Intersection of binarized gender and ethnicity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Wm,
    Wf,
    Nwm,
    Nwf,
    Excluded,
}

impl Group {
    /// The four demographic groups in report column order.
    pub const DEMOGRAPHIC: [Group; 4] = [Group::Wm, Group::Wf, Group::Nwm, Group::Nwf];

    pub fn from_traits(gender: Gender, ethnicity: Ethnicity) -> Group {
        match (gender, ethnicity) {
            (Gender::Male, Ethnicity::White) => Group::Wm,
            (Gender::Female, Ethnicity::White) => Group::Wf,
            (Gender::Male, Ethnicity::NonWhite) => Group::Nwm,
            (Gender::Female, Ethnicity::NonWhite) => Group::Nwf,
            _ => Group::Excluded,
        }
    }

    /// Position in [`Group::DEMOGRAPHIC`], `None` for excluded annotators.
    pub fn index(self) -> Option<usize> {
        Group::DEMOGRAPHIC.iter().position(|g| *g == self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Wm => "wm",
            Group::Wf => "wf",
            Group::Nwm => "nwm",
            Group::Nwf => "nwf",
            Group::Excluded => "excluded",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "wm" => Ok(Group::Wm),
            "wf" => Ok(Group::Wf),
            "nwm" => Ok(Group::Nwm),
            "nwf" => Ok(Group::Nwf),
            "excluded" => Ok(Group::Excluded),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

/// Maps free-text ethnicity values onto [`Ethnicity`].
///
/// Lookups are case-insensitive and trimmed. Values without an explicit entry
/// fall back to the default rule: `white`/`caucasian` are white, empty or
/// `unknown`/`other` are other, anything else is non-white.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EthnicityMap {
    overrides: HashMap<String, Ethnicity>,
}

impl EthnicityMap {
    pub fn with_override(mut self, value: &str, class: Ethnicity) -> Self {
        self.overrides
            .insert(value.trim().to_ascii_lowercase(), class);
        self
    }

    /// Reads a `value,class` CSV where class is `white`, `non_white` or `other`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        check_header(path, &reader.headers().map_err(|e| csv_error(path, e))?.clone(), &["value", "class"], &[])?;
        let mut map = EthnicityMap::default();
        for row in reader.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = line_of(&row);
            let class = row[1].parse::<Ethnicity>().map_err(|message| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message,
            })?;
            map = map.with_override(&row[0], class);
        }
        Ok(map)
    }

    pub fn classify(&self, raw: &str) -> Ethnicity {
        let key = raw.trim().to_ascii_lowercase();
        if let Some(class) = self.overrides.get(&key) {
            return *class;
        }
        match key.as_str() {
            "white" | "caucasian" => Ethnicity::White,
            "" | "unknown" | "other" => Ethnicity::Other,
            _ => Ethnicity::NonWhite,
        }
    }
}

/// How a majority vote with several top labels is resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Pick the negative class if it is among the tied labels, otherwise the
    /// first tied label in label-space order.
    #[default]
    TieNegative,
    /// Leave the text without a gold label.
    TieDrop,
}

impl FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tie_negative" | "negative" => Ok(TiePolicy::TieNegative),
            "tie_drop" | "drop" => Ok(TiePolicy::TieDrop),
            other => Err(format!("unknown tie policy `{other}`")),
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::TieNegative => "tie_negative",
            TiePolicy::TieDrop => "tie_drop",
        })
    }
}

#[derive(Clone, Debug)]
pub struct IngestionConfig {
    pub label_space: LabelSpace,
    pub min_annotations: usize,
    pub tie_policy: TiePolicy,
    /// Whether annotators outside the four groups count towards the full
    /// pool and the global gold label.
    pub include_excluded_in_pool: bool,
    pub ethnicity_map: EthnicityMap,
}

impl Default for IngestionConfig {
    fn default() -> Self {
        Self {
            label_space: LabelSpace::hate_speech(),
            min_annotations: 20,
            tie_policy: TiePolicy::TieNegative,
            include_excluded_in_pool: true,
            ethnicity_map: EthnicityMap::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text_id: String,
    pub content: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotator {
    pub annotator_id: String,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
}

impl Annotator {
    pub fn new(annotator_id: impl Into<String>, gender: Gender, ethnicity: Ethnicity) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            gender,
            ethnicity,
        }
    }

    pub fn group(&self) -> Group {
        Group::from_traits(self.gender, self.ethnicity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub text_id: String,
    pub annotator_id: String,
    pub label: LabelId,
}

/// Unfiltered corpus contents, as parsed or generated.
#[derive(Clone, Debug, Default)]
pub struct RawCorpus {
    pub texts: Vec<TextRecord>,
    pub annotators: Vec<Annotator>,
    pub annotations: Vec<Annotation>,
    /// Gold labels shipped with the source dataset, if any.
    pub original_gold: BTreeMap<String, LabelId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub annotators_below_threshold: usize,
    pub annotations_removed: usize,
    pub texts_removed: usize,
    pub excluded_annotators_removed_from_pool: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieSummary {
    pub global: usize,
    pub per_group: BTreeMap<Group, usize>,
}

/// A filtered, validated disaggregated corpus. Immutable after construction.
#[derive(Clone, Debug)]
pub struct AnnotationCorpus {
    label_space: LabelSpace,
    tie_policy: TiePolicy,
    texts: Vec<TextRecord>,
    text_ranges: Vec<Range<usize>>,
    annotators: Vec<Annotator>,
    annotator_index: HashMap<String, usize>,
    annotations: Vec<Annotation>,
    gold: BTreeMap<String, LabelId>,
    group_gold: BTreeMap<(Group, String), LabelId>,
    original_gold: BTreeMap<String, LabelId>,
    ties: TieSummary,
    filter: FilterSummary,
}

impl PartialEq for AnnotationCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.label_space == other.label_space
            && self.texts == other.texts
            && self.annotators == other.annotators
            && self.annotations == other.annotations
            && self.gold == other.gold
            && self.group_gold == other.group_gold
            && self.original_gold == other.original_gold
    }
}

impl AnnotationCorpus {
    /// Validates and filters raw contents, then derives gold maps.
    pub fn build(raw: RawCorpus, config: &IngestionConfig) -> Result<Self> {
        let RawCorpus {
            texts,
            annotators,
            annotations,
            original_gold,
        } = raw;
        let label_space = config.label_space.clone();

        let mut annotator_map: BTreeMap<String, Annotator> = BTreeMap::new();
        for a in annotators {
            if annotator_map.contains_key(&a.annotator_id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate annotator `{}`",
                    a.annotator_id
                )));
            }
            annotator_map.insert(a.annotator_id.clone(), a);
        }

        let mut seen = BTreeSet::new();
        for ann in &annotations {
            if !annotator_map.contains_key(&ann.annotator_id) {
                return Err(Error::InvalidConfig(format!(
                    "annotation references unknown annotator `{}`",
                    ann.annotator_id
                )));
            }
            if !label_space.contains(ann.label) {
                return Err(Error::UnknownLabel(format!("#{}", ann.label.0)));
            }
            if !seen.insert((ann.text_id.as_str(), ann.annotator_id.as_str())) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate annotation of text `{}` by annotator `{}`",
                    ann.text_id, ann.annotator_id
                )));
            }
        }
        drop(seen);

        let mut filter = FilterSummary::default();

        if !config.include_excluded_in_pool {
            let before = annotator_map.len();
            annotator_map.retain(|_, a| a.group() != Group::Excluded);
            filter.excluded_annotators_removed_from_pool = before - annotator_map.len();
        }

        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ann in &annotations {
            if annotator_map.contains_key(&ann.annotator_id) {
                *counts.entry(ann.annotator_id.as_str()).or_default() += 1;
            }
        }
        let keep: BTreeSet<String> = annotator_map
            .keys()
            .filter(|id| {
                let n = counts.get(id.as_str()).copied().unwrap_or(0);
                n >= config.min_annotations && n > 0
            })
            .cloned()
            .collect();
        filter.annotators_below_threshold = annotator_map.len() - keep.len();
        annotator_map.retain(|id, _| keep.contains(id));
        drop(counts);

        let all_text_ids: BTreeSet<String> =
            annotations.iter().map(|a| a.text_id.clone()).collect();
        let total_annotations = annotations.len();
        let mut annotations: Vec<Annotation> = annotations
            .into_iter()
            .filter(|a| keep.contains(&a.annotator_id))
            .collect();
        filter.annotations_removed = total_annotations - annotations.len();
        annotations.sort_by(|a, b| {
            (a.text_id.as_str(), a.annotator_id.as_str())
                .cmp(&(b.text_id.as_str(), b.annotator_id.as_str()))
        });

        let annotated: BTreeSet<&str> = annotations.iter().map(|a| a.text_id.as_str()).collect();
        let mut text_map: BTreeMap<String, TextRecord> = BTreeMap::new();
        for t in texts {
            match text_map.get_mut(&t.text_id) {
                Some(existing) => {
                    if existing.content.is_none() {
                        existing.content = t.content;
                    }
                }
                None => {
                    text_map.insert(t.text_id.clone(), t);
                }
            }
        }
        for id in all_text_ids {
            text_map.entry(id.clone()).or_insert_with(|| TextRecord {
                text_id: id,
                content: None,
            });
        }
        let before = text_map.len();
        text_map.retain(|id, _| annotated.contains(id.as_str()));
        filter.texts_removed = before - text_map.len();
        let texts: Vec<TextRecord> = text_map.into_values().collect();

        let mut text_ranges = Vec::with_capacity(texts.len());
        let mut start = 0;
        for t in &texts {
            let mut end = start;
            while end < annotations.len() && annotations[end].text_id == t.text_id {
                end += 1;
            }
            text_ranges.push(start..end);
            start = end;
        }

        let annotators: Vec<Annotator> = annotator_map.into_values().collect();
        let annotator_index = annotators
            .iter()
            .enumerate()
            .map(|(i, a)| (a.annotator_id.clone(), i))
            .collect();

        let original_gold = original_gold
            .into_iter()
            .filter(|(id, _)| annotated.contains(id.as_str()))
            .collect();

        let mut corpus = AnnotationCorpus {
            label_space,
            tie_policy: config.tie_policy,
            texts,
            text_ranges,
            annotators,
            annotator_index,
            annotations,
            gold: BTreeMap::new(),
            group_gold: BTreeMap::new(),
            original_gold,
            ties: TieSummary::default(),
            filter,
        };
        corpus.derive_gold();
        Ok(corpus)
    }

    fn derive_gold(&mut self) {
        let n_labels = self.label_space.len();
        let mut gold = BTreeMap::new();
        let mut group_gold = BTreeMap::new();
        let mut ties = TieSummary::default();
        for (text, range) in self.texts.iter().zip(&self.text_ranges) {
            let mut all = vec![0usize; n_labels];
            let mut per_group = [(); 4].map(|_| vec![0usize; n_labels]);
            for ann in &self.annotations[range.clone()] {
                all[ann.label.0] += 1;
                if let Some(g) = self.annotator(&ann.annotator_id).and_then(|a| a.group().index()) {
                    per_group[g][ann.label.0] += 1;
                }
            }
            match majority_vote(&all, self.tie_policy, self.label_space.negative()) {
                Vote::Clear(l) => {
                    gold.insert(text.text_id.clone(), l);
                }
                Vote::Tie(resolved) => {
                    ties.global += 1;
                    if let Some(l) = resolved {
                        gold.insert(text.text_id.clone(), l);
                    }
                }
                Vote::Empty => {}
            }
            for (gi, counts) in per_group.iter().enumerate() {
                let group = Group::DEMOGRAPHIC[gi];
                match majority_vote(counts, self.tie_policy, self.label_space.negative()) {
                    Vote::Clear(l) => {
                        group_gold.insert((group, text.text_id.clone()), l);
                    }
                    Vote::Tie(resolved) => {
                        *ties.per_group.entry(group).or_default() += 1;
                        if let Some(l) = resolved {
                            group_gold.insert((group, text.text_id.clone()), l);
                        }
                    }
                    Vote::Empty => {}
                }
            }
        }
        self.gold = gold;
        self.group_gold = group_gold;
        self.ties = ties;
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn tie_policy(&self) -> TiePolicy {
        self.tie_policy
    }

    /// Texts in `text_id` order.
    pub fn texts(&self) -> &[TextRecord] {
        &self.texts
    }

    /// Annotators in `annotator_id` order.
    pub fn annotators(&self) -> &[Annotator] {
        &self.annotators
    }

    /// Annotations in `(text_id, annotator_id)` order.
    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn annotator(&self, id: &str) -> Option<&Annotator> {
        self.annotator_index.get(id).map(|&i| &self.annotators[i])
    }

    pub fn group_of(&self, annotator_id: &str) -> Option<Group> {
        self.annotator(annotator_id).map(Annotator::group)
    }

    /// Each text together with its annotations.
    pub fn texts_with_annotations(&self) -> impl Iterator<Item = (&TextRecord, &[Annotation])> {
        self.texts
            .iter()
            .zip(&self.text_ranges)
            .map(|(t, r)| (t, &self.annotations[r.clone()]))
    }

    pub fn gold(&self) -> &BTreeMap<String, LabelId> {
        &self.gold
    }

    pub fn gold_of(&self, text_id: &str) -> Option<LabelId> {
        self.gold.get(text_id).copied()
    }

    pub fn group_gold_of(&self, group: Group, text_id: &str) -> Option<LabelId> {
        self.group_gold.get(&(group, text_id.to_string())).copied()
    }

    pub fn group_gold(&self) -> &BTreeMap<(Group, String), LabelId> {
        &self.group_gold
    }

    pub fn original_gold(&self) -> &BTreeMap<String, LabelId> {
        &self.original_gold
    }

    pub fn ties(&self) -> &TieSummary {
        &self.ties
    }

    pub fn filter_summary(&self) -> &FilterSummary {
        &self.filter
    }
}

enum Vote {
    Clear(LabelId),
    Tie(Option<LabelId>),
    Empty,
}

fn majority_vote(counts: &[usize], policy: TiePolicy, negative: Option<LabelId>) -> Vote {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Vote::Empty;
    }
    let tied: Vec<LabelId> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == max)
        .map(|(i, _)| LabelId(i))
        .collect();
    if tied.len() == 1 {
        return Vote::Clear(tied[0]);
    }
    Vote::Tie(match policy {
        TiePolicy::TieDrop => None,
        TiePolicy::TieNegative => Some(match negative {
            Some(neg) if tied.contains(&neg) => neg,
            _ => tied[0],
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub messages: usize,
    pub annotations: usize,
    pub annotators: usize,
    pub mean_annotations_per_message: f64,
    /// Share of individual labels that differ from the recomputed gold label,
    /// over annotations whose text has a gold label.
    pub divergent_fraction: f64,
    /// Same share against the gold labels shipped with the dataset.
    pub divergent_fraction_original_gold: Option<f64>,
    pub texts_without_gold: usize,
    pub ties: TieSummary,
    pub group_annotators: BTreeMap<Group, usize>,
    pub group_annotations: BTreeMap<Group, usize>,
    pub filter: FilterSummary,
}

pub fn corpus_stats(corpus: &AnnotationCorpus) -> CorpusStats {
    let messages = corpus.texts.len();
    let annotations = corpus.annotations.len();

    let divergent_against = |gold: &BTreeMap<String, LabelId>| -> Option<f64> {
        let (mut with_gold, mut divergent) = (0usize, 0usize);
        for ann in &corpus.annotations {
            if let Some(g) = gold.get(&ann.text_id) {
                with_gold += 1;
                if *g != ann.label {
                    divergent += 1;
                }
            }
        }
        (with_gold > 0).then(|| divergent as f64 / with_gold as f64)
    };

    let mut group_annotators = BTreeMap::new();
    for a in &corpus.annotators {
        *group_annotators.entry(a.group()).or_insert(0) += 1;
    }
    let mut group_annotations = BTreeMap::new();
    for ann in &corpus.annotations {
        if let Some(g) = corpus.group_of(&ann.annotator_id) {
            *group_annotations.entry(g).or_insert(0) += 1;
        }
    }

    CorpusStats {
        messages,
        annotations,
        annotators: corpus.annotators.len(),
        mean_annotations_per_message: if messages == 0 {
            0.0
        } else {
            annotations as f64 / messages as f64
        },
        divergent_fraction: divergent_against(&corpus.gold).unwrap_or(0.0),
        divergent_fraction_original_gold: if corpus.original_gold.is_empty() {
            None
        } else {
            divergent_against(&corpus.original_gold)
        },
        texts_without_gold: messages - corpus.gold.len(),
        ties: corpus.ties.clone(),
        group_annotators,
        group_annotations,
        filter: corpus.filter.clone(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn check_header(
    path: &Path,
    header: &csv::StringRecord,
    required: &[&str],
    optional: &[&str],
) -> Result<()> {
    let fields: Vec<&str> = header.iter().collect();
    let malformed = |message: String| Error::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    if fields.len() < required.len() || fields[..required.len()] != *required {
        return Err(malformed(format!(
            "header must start with `{}`, found `{}`",
            required.join(","),
            fields.join(",")
        )));
    }
    for extra in &fields[required.len()..] {
        if !optional.contains(extra) {
            return Err(malformed(format!("unexpected column `{extra}`")));
        }
    }
    Ok(())
}

fn read_annotators(path: &Path, ethnicity_map: &EthnicityMap) -> Result<Vec<Annotator>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(path, &header, &["annotator_id", "gender", "ethnicity"], &[])?;

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = line_of(&row);
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let id = &row[0];
        if id.is_empty() {
            return Err(malformed("empty annotator_id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(malformed(format!("duplicate annotator `{id}`")));
        }
        let gender = row[1].parse::<Gender>().map_err(malformed)?;
        out.push(Annotator::new(id, gender, ethnicity_map.classify(&row[2])));
    }
    Ok(out)
}

/// Parses the annotations and annotators CSV files and builds a filtered
/// corpus.
///
/// Annotations: `text_id,annotator_id,label[,content][,gold]`.
/// Annotators: `annotator_id,gender,ethnicity`.
pub fn load_corpus(
    annotations_path: &Path,
    annotators_path: &Path,
    config: &IngestionConfig,
) -> Result<AnnotationCorpus> {
    let annotators = read_annotators(annotators_path, &config.ethnicity_map)?;
    let known: BTreeSet<&str> = annotators.iter().map(|a| a.annotator_id.as_str()).collect();

    let path = annotations_path;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(
        path,
        &header,
        &["text_id", "annotator_id", "label"],
        &["content", "gold"],
    )?;
    let content_col = header.iter().position(|h| h == "content");
    let gold_col = header.iter().position(|h| h == "gold");

    let mut texts: BTreeMap<String, TextRecord> = BTreeMap::new();
    let mut original_gold: BTreeMap<String, LabelId> = BTreeMap::new();
    let mut annotations = Vec::new();
    let mut pairs = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = line_of(&row);
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (text_id, annotator_id, label) = (&row[0], &row[1], &row[2]);
        if text_id.is_empty() || annotator_id.is_empty() {
            return Err(malformed("empty text_id or annotator_id".into()));
        }
        if !known.contains(annotator_id) {
            return Err(Error::UnknownAnnotator {
                path: path.to_path_buf(),
                line,
                annotator_id: annotator_id.to_string(),
            });
        }
        let label = config
            .label_space
            .id(label)
            .ok_or_else(|| malformed(format!("label `{label}` is not part of the label space")))?;
        if !pairs.insert((text_id.to_string(), annotator_id.to_string())) {
            return Err(Error::DuplicateAnnotation {
                path: path.to_path_buf(),
                line,
                text_id: text_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }

        let record = texts.entry(text_id.to_string()).or_insert_with(|| TextRecord {
            text_id: text_id.to_string(),
            content: None,
        });
        if let Some(c) = content_col.map(|i| &row[i]) {
            if record.content.is_none() && !c.is_empty() {
                record.content = Some(c.to_string());
            }
        }
        if let Some(g) = gold_col.map(|i| &row[i]).filter(|g| !g.is_empty()) {
            let g = config
                .label_space
                .id(g)
                .ok_or_else(|| malformed(format!("gold label `{g}` is not part of the label space")))?;
            match original_gold.get(text_id) {
                Some(prev) if *prev != g => {
                    return Err(malformed(format!(
                        "conflicting gold labels for text `{text_id}`"
                    )))
                }
                _ => {
                    original_gold.insert(text_id.to_string(), g);
                }
            }
        }
        annotations.push(Annotation {
            text_id: text_id.to_string(),
            annotator_id: annotator_id.to_string(),
            label,
        });
    }

    AnnotationCorpus::build(
        RawCorpus {
            texts: texts.into_values().collect(),
            annotators,
            annotations,
            original_gold,
        },
        config,
    )
}

/// Writes a corpus back to the two CSV formats accepted by [`load_corpus`].
pub fn write_corpus(
    corpus: &AnnotationCorpus,
    annotations_path: &Path,
    annotators_path: &Path,
) -> Result<()> {
    let has_content = corpus.texts.iter().any(|t| t.content.is_some());
    let has_gold = !corpus.original_gold.is_empty();
    let space = &corpus.label_space;

    let file = File::create(annotations_path).map_err(|e| Error::io(annotations_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["text_id", "annotator_id", "label"];
    if has_content {
        header.push("content");
    }
    if has_gold {
        header.push("gold");
    }
    w.write_record(&header).map_err(|e| csv_error(annotations_path, e))?;
    for (text, anns) in corpus.texts_with_annotations() {
        for ann in anns {
            let mut row = vec![
                ann.text_id.clone(),
                ann.annotator_id.clone(),
                space.name(ann.label).to_string(),
            ];
            if has_content {
                row.push(text.content.clone().unwrap_or_default());
            }
            if has_gold {
                row.push(
                    corpus
                        .original_gold
                        .get(&text.text_id)
                        .map(|g| space.name(*g).to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row).map_err(|e| csv_error(annotations_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(annotations_path, e))?;

    let file = File::create(annotators_path).map_err(|e| Error::io(annotators_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["annotator_id", "gender", "ethnicity"])
        .map_err(|e| csv_error(annotators_path, e))?;
    for a in &corpus.annotators {
        w.write_record([
            a.annotator_id.as_str(),
            &a.gender.to_string(),
            &a.ethnicity.to_string(),
        ])
        .map_err(|e| csv_error(annotators_path, e))?;
    }
    w.flush().map_err(|e| Error::io(annotators_path, e))?;
    Ok(())
}
