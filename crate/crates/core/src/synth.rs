//! Synthetic corpora and model predictions with known, injected group
//! biases.
//!
//! Every random draw comes from a ChaCha stream selected by hashing the
//! entity it belongs to (a text, an annotation, a model/text pair), so
//! growing the annotator pool leaves every existing annotator's draws alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Annotation, AnnotationCorpus, Annotator, Ethnicity, Gender, Group, IngestionConfig, LabelId,
    LabelSpace, RawCorpus, TextRecord,
};
use crate::error::{Error, Result};
use crate::predictions::PredictionSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_texts: usize,
    pub annotators_per_group: BTreeMap<Group, usize>,
    /// Annotators sampled per text; everyone annotates when this is at least
    /// the pool size.
    pub annotations_per_text: usize,
    pub base_hate_rate: f64,
    /// Probability that an annotator of the group flips the latent label.
    /// Missing groups never flip.
    pub group_flip_rate: BTreeMap<Group, f64>,
    /// Standard deviation of additive Gaussian noise on the hate probability.
    pub model_noise: f64,
    /// Probability mass moved away from the labels the group's annotators
    /// gave on each text, in proportion to their vote shares.
    pub model_group_miscalibration: BTreeMap<Group, f64>,
    pub seed: u64,
    pub model_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_texts: 200,
            annotators_per_group: Group::DEMOGRAPHIC.iter().map(|g| (*g, 3)).collect(),
            annotations_per_text: 12,
            base_hate_rate: 0.5,
            group_flip_rate: BTreeMap::new(),
            model_noise: 0.0,
            model_group_miscalibration: BTreeMap::new(),
            seed: 0,
            model_id: "synthetic".into(),
        }
    }
}

fn check_rate(what: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what,
            value: v,
            min: 0.0,
            max: 1.0,
        })
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_texts == 0 {
            return Err(Error::InvalidConfig("n_texts must be >= 1".into()));
        }
        if self.annotations_per_text == 0 {
            return Err(Error::InvalidConfig("annotations_per_text must be >= 1".into()));
        }
        if self.annotators_per_group.values().sum::<usize>() == 0 {
            return Err(Error::InvalidConfig("at least one annotator is required".into()));
        }
        check_rate("base_hate_rate", self.base_hate_rate)?;
        for v in self.group_flip_rate.values() {
            check_rate("group_flip_rate", *v)?;
        }
        for v in self.model_group_miscalibration.values() {
            check_rate("model_group_miscalibration", *v)?;
        }
        if !(self.model_noise >= 0.0 && self.model_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "model_noise must be >= 0, got {}",
                self.model_noise
            )));
        }
        if self.model_id.is_empty() {
            return Err(Error::InvalidConfig("model_id must not be empty".into()));
        }
        Ok(())
    }

    fn flip_rate(&self, g: Group) -> f64 {
        self.group_flip_rate.get(&g).copied().unwrap_or(0.0)
    }
}

/// FNV-1a; only used to pick a stream, so collisions merely correlate draws.
fn stream_id(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain([0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(parts));
    rng
}

fn traits_of(g: Group) -> (Gender, Ethnicity) {
    match g {
        Group::Wm => (Gender::Male, Ethnicity::White),
        Group::Wf => (Gender::Female, Ethnicity::White),
        Group::Nwm => (Gender::Male, Ethnicity::NonWhite),
        Group::Nwf => (Gender::Female, Ethnicity::NonWhite),
        Group::Excluded => (Gender::Other, Ethnicity::Other),
    }
}

pub const HATE: LabelId = LabelId(0);
pub const NOT_HATE: LabelId = LabelId(1);

/// Draws a corpus over the binary hate-speech label space and one model's
/// predictions for it.
pub fn generate(spec: &SynthSpec) -> Result<(AnnotationCorpus, PredictionSet)> {
    spec.validate()?;
    let text_width = spec.n_texts.saturating_sub(1).to_string().len().max(4);
    let annotators: Vec<Annotator> = spec
        .annotators_per_group
        .iter()
        .flat_map(|(g, n)| {
            let width = n.saturating_sub(1).to_string().len().max(3);
            (0..*n).map(move |i| {
                let (gender, ethnicity) = traits_of(*g);
                Annotator::new(format!("{g}_{i:0width$}"), gender, ethnicity)
            })
        })
        .collect();
    let mean_flip = annotators
        .iter()
        .map(|a| spec.flip_rate(a.group()))
        .sum::<f64>()
        / annotators.len() as f64;
    let noise = Normal::new(0.0, spec.model_noise)
        .map_err(|e| Error::InvalidConfig(format!("model_noise: {e}")))?;

    let mut texts = Vec::with_capacity(spec.n_texts);
    let mut annotations = Vec::new();
    let mut preds = PredictionSet::new(spec.model_id.clone());

    for t in 0..spec.n_texts {
        let text_id = format!("t{t:0text_width$}");
        let latent = if rng_for(spec.seed, &["latent", &text_id]).random::<f64>() < spec.base_hate_rate {
            HATE
        } else {
            NOT_HATE
        };
        let other = if latent == HATE { NOT_HATE } else { HATE };

        // lowest keyed scores win, so selection is stable per (text, annotator)
        let mut chosen: Vec<(f64, &Annotator)> = annotators
            .iter()
            .map(|a| {
                let u = rng_for(spec.seed, &["select", &text_id, &a.annotator_id]).random::<f64>();
                (u, a)
            })
            .collect();
        if spec.annotations_per_text < chosen.len() {
            chosen.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.annotator_id.cmp(&y.1.annotator_id)));
            chosen.truncate(spec.annotations_per_text);
        }

        let mut per_group: BTreeMap<Group, (usize, usize)> = BTreeMap::new();
        for (_, a) in &chosen {
            let g = a.group();
            let flipped =
                rng_for(spec.seed, &["flip", &text_id, &a.annotator_id]).random::<f64>() < spec.flip_rate(g);
            let entry = per_group.entry(g).or_default();
            entry.0 += 1;
            if flipped {
                entry.1 += 1;
            }
            annotations.push(Annotation {
                text_id: text_id.clone(),
                annotator_id: a.annotator_id.clone(),
                label: if flipped { other } else { latent },
            });
        }

        // each targeted group pushes `m` of mass off the labels it gave, split
        // by its vote shares on this text
        let mut p_latent = 1.0 - mean_flip;
        for (g, (n, flipped)) in &per_group {
            let m = spec.model_group_miscalibration.get(g).copied().unwrap_or(0.0);
            let against = *flipped as f64 / *n as f64;
            p_latent += m * (against - (1.0 - against));
        }
        if spec.model_noise > 0.0 {
            let mut rng = rng_for(spec.seed, &["noise", &spec.model_id, &text_id]);
            p_latent += noise.sample(&mut rng);
        }
        let p_latent = p_latent.clamp(0.0, 1.0);
        let mut probs = vec![0.0; 2];
        probs[latent.0] = p_latent;
        probs[other.0] = 1.0 - p_latent;
        preds.insert(text_id.clone(), probs)?;

        texts.push(TextRecord {
            text_id,
            content: Some(format!("synthetic text {t}")),
        });
    }

    let config = IngestionConfig {
        label_space: LabelSpace::hate_speech(),
        min_annotations: 1,
        ..Default::default()
    };
    let corpus = AnnotationCorpus::build(
        RawCorpus {
            texts,
            annotators,
            annotations,
            original_gold: BTreeMap::new(),
        },
        &config,
    )?;
    Ok((corpus, preds))
}
