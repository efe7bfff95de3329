//! Brute-force reference implementations of every metric, for checking the
//! engine on small instances.
//!
//! Nothing here calls into the engine's metric code. Each quantity is
//! recomputed from the raw annotations and probabilities by the most direct
//! translation of its definition: gold labels by counting votes, deltas by
//! subtracting two Brier scores, bins by scanning intervals, F1 and kappa
//! from confusion counts. Cluster membership is the one input taken from the
//! engine, since k-means has no closed form.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    Annotation, AnnotationCorpus, Annotator, Ethnicity, Gender, Group, IngestionConfig, LabelId,
    LabelSpace, RawCorpus, TiePolicy,
};
use crate::conformity::GoldSource;
use crate::error::Result;
use crate::performance::{kappa_matrix, F1Reference, F1Variant};
use crate::pipeline::ModelEvaluation;
use crate::predictions::PredictionSet;
use crate::report::RunConfig;

/// Flat map from metric key to value; `None` marks an absent metric.
pub type MetricBundle = BTreeMap<String, Option<f64>>;

const GROUPS: [(Group, &str); 4] = [
    (Group::Wm, "wm"),
    (Group::Wf, "wf"),
    (Group::Nwm, "nwm"),
    (Group::Nwf, "nwf"),
];

fn group_of(a: &Annotator) -> Group {
    if a.gender == Gender::Male && a.ethnicity == Ethnicity::White {
        Group::Wm
    } else if a.gender == Gender::Female && a.ethnicity == Ethnicity::White {
        Group::Wf
    } else if a.gender == Gender::Male && a.ethnicity == Ethnicity::NonWhite {
        Group::Nwm
    } else if a.gender == Gender::Female && a.ethnicity == Ethnicity::NonWhite {
        Group::Nwf
    } else {
        Group::Excluded
    }
}

fn vote(labels: &[LabelId], n_labels: usize, policy: TiePolicy, negative: Option<LabelId>) -> Option<LabelId> {
    if labels.is_empty() {
        return None;
    }
    let mut best_count = 0;
    for l in 0..n_labels {
        let c = labels.iter().filter(|x| x.0 == l).count();
        if c > best_count {
            best_count = c;
        }
    }
    let winners: Vec<usize> = (0..n_labels)
        .filter(|l| labels.iter().filter(|x| x.0 == *l).count() == best_count)
        .collect();
    if winners.len() == 1 {
        return Some(LabelId(winners[0]));
    }
    match policy {
        TiePolicy::TieDrop => None,
        TiePolicy::TieNegative => match negative {
            Some(n) if winners.contains(&n.0) => Some(n),
            _ => Some(LabelId(winners[0])),
        },
    }
}

fn brier(probs: &[f64], label: LabelId) -> f64 {
    let mut total = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let o = if i == label.0 { 1.0 } else { 0.0 };
        total += (o - p).powi(2);
    }
    total / probs.len() as f64
}

fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let mut total = 0.0;
    for x in p {
        total += x + eps;
    }
    p.iter().map(|x| (x + eps) / total).collect()
}

fn kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let p = smooth(p, eps);
    let q = smooth(q, eps);
    let mut total = 0.0;
    for i in 0..p.len() {
        total += p[i] * (p[i] / q[i]).ln();
    }
    total
}

struct Rec {
    text: String,
    annotator: String,
    group: Group,
    delta: f64,
    agrees: bool,
}

fn trinary(recs: &[&Rec]) -> [f64; 3] {
    let n = recs.len() as f64;
    let neg = recs.iter().filter(|r| !r.agrees && r.delta < 0.0).count() as f64;
    let pos = recs.iter().filter(|r| !r.agrees && r.delta > 0.0).count() as f64;
    let zero = recs.iter().filter(|r| r.agrees || r.delta == 0.0).count() as f64;
    [neg / n, zero / n, pos / n]
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn f1(pairs: &[(usize, usize)], n_labels: usize, variant: F1Variant, positive: usize) -> f64 {
    let class = |c: usize| -> Option<f64> {
        let tp = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
        let fp = pairs.iter().filter(|(t, p)| *t != c && *p == c).count() as f64;
        let fn_ = pairs.iter().filter(|(t, p)| *t == c && *p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            return None;
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        Some(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        })
    };
    match variant {
        F1Variant::Macro => {
            let scores: Vec<f64> = (0..n_labels).filter_map(class).collect();
            mean(&scores).unwrap_or(0.0)
        }
        F1Variant::BinaryPositive => class(positive).unwrap_or(1.0),
    }
}

fn kappa(pairs: &[(usize, usize)], n_labels: usize) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let observed = pairs.iter().filter(|(a, b)| a == b).count() as f64 / n;
    let mut expected = 0.0;
    for l in 0..n_labels {
        let pa = pairs.iter().filter(|(a, _)| *a == l).count() as f64 / n;
        let pb = pairs.iter().filter(|(_, b)| *b == l).count() as f64 / n;
        expected += pa * pb;
    }
    if expected >= 1.0 {
        return Some(if observed >= 1.0 { 1.0 } else { 0.0 });
    }
    Some((observed - expected) / (1.0 - expected))
}

fn strict_majority(labels: &[usize], n_labels: usize) -> Option<usize> {
    let counts: Vec<usize> = (0..n_labels)
        .map(|l| labels.iter().filter(|x| **x == l).count())
        .collect();
    let max = *counts.iter().max()?;
    if max == 0 || counts.iter().filter(|c| **c == max).count() > 1 {
        return None;
    }
    counts.iter().position(|c| *c == max)
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

/// Every metric recomputed from scratch. `assignments` maps annotator ids to
/// cluster ids in `0..k`; pass `None` when no clustering was possible.
pub fn oracle_metrics(
    corpus: &AnnotationCorpus,
    preds: &PredictionSet,
    config: &RunConfig,
    assignments: Option<(&BTreeMap<String, usize>, usize)>,
) -> MetricBundle {
    let mut out = MetricBundle::new();
    let space = corpus.label_space();
    let n_labels = space.len();
    let eps = config.epsilon;
    let anns: &[Annotation] = corpus.annotations();
    let groups: BTreeMap<&str, Group> = corpus
        .annotators()
        .iter()
        .map(|a| (a.annotator_id.as_str(), group_of(a)))
        .collect();
    let text_ids: BTreeSet<&str> = anns.iter().map(|a| a.text_id.as_str()).collect();

    let mut gold: BTreeMap<&str, Option<LabelId>> = BTreeMap::new();
    let mut group_gold: BTreeMap<(&str, Group), Option<LabelId>> = BTreeMap::new();
    for t in &text_ids {
        let labels: Vec<LabelId> = anns.iter().filter(|a| a.text_id == *t).map(|a| a.label).collect();
        gold.insert(t, vote(&labels, n_labels, corpus.tie_policy(), space.negative()));
        for (g, _) in GROUPS {
            let labels: Vec<LabelId> = anns
                .iter()
                .filter(|a| a.text_id == *t && groups[a.annotator_id.as_str()] == g)
                .map(|a| a.label)
                .collect();
            group_gold.insert((t, g), vote(&labels, n_labels, corpus.tie_policy(), space.negative()));
        }
        out.insert(format!("gold/{t}"), gold[t].map(|l| l.0 as f64));
    }

    let mut pool: Vec<Rec> = Vec::new();
    let mut grouped: Vec<Rec> = Vec::new();
    for a in anns {
        let probs = preds.get(&a.text_id).expect("coverage checked by caller");
        let group = groups[a.annotator_id.as_str()];
        let make = |reference: LabelId| Rec {
            text: a.text_id.clone(),
            annotator: a.annotator_id.clone(),
            group,
            delta: brier(probs, a.label) - brier(probs, reference),
            agrees: a.label == reference,
        };
        if let Some(g) = gold[a.text_id.as_str()] {
            pool.push(make(g));
        }
        if group == Group::Excluded {
            continue;
        }
        let reference = match config.gold_source {
            GoldSource::GlobalMajority => gold[a.text_id.as_str()],
            GoldSource::GroupMajority => group_gold[&(a.text_id.as_str(), group)],
        };
        if let Some(r) = reference {
            grouped.push(make(r));
        }
    }

    for r in &pool {
        out.insert(format!("delta/all/{}/{}", r.text, r.annotator), Some(r.delta));
    }
    for r in &grouped {
        out.insert(format!("delta/group/{}/{}", r.text, r.annotator), Some(r.delta));
    }

    let pool_refs: Vec<&Rec> = pool.iter().collect();
    let pool_deltas: Vec<f64> = pool.iter().map(|r| r.delta).collect();
    out.insert("n/all".into(), Some(pool.len() as f64));
    out.insert("mean/all".into(), mean(&pool_deltas));
    let demographic: Vec<f64> = pool
        .iter()
        .filter(|r| r.group != Group::Excluded)
        .map(|r| r.delta)
        .collect();
    out.insert("mean/all_demographic".into(), mean(&demographic));
    let pool_tri = (!pool.is_empty()).then(|| trinary(&pool_refs));
    for (i, name) in ["neg", "zero", "pos"].iter().enumerate() {
        out.insert(format!("trinary/all/{name}"), pool_tri.map(|t| t[i]));
    }
    for (g, gname) in GROUPS {
        let recs: Vec<&Rec> = grouped.iter().filter(|r| r.group == g).collect();
        let deltas: Vec<f64> = recs.iter().map(|r| r.delta).collect();
        out.insert(format!("n/{gname}"), Some(recs.len() as f64));
        out.insert(format!("mean/{gname}"), mean(&deltas));
        let tri = (!recs.is_empty()).then(|| trinary(&recs));
        for (i, name) in ["neg", "zero", "pos"].iter().enumerate() {
            out.insert(format!("trinary/{gname}/{name}"), tri.map(|t| t[i]));
        }
        let divergence = match (pool_tri, tri) {
            (Some(p), Some(q)) => Some(kl(&p, &q, eps)),
            _ => None,
        };
        out.insert(format!("kl/{gname}"), divergence);
    }

    // fingerprints: one row per annotator with group-set records
    let bins = config.bin_count;
    let annotators_with_records: BTreeSet<&str> = grouped.iter().map(|r| r.annotator.as_str()).collect();
    let mut fingerprints: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for id in &annotators_with_records {
        let deltas: Vec<f64> = grouped
            .iter()
            .filter(|r| r.annotator == *id)
            .map(|r| r.delta)
            .collect();
        let mut row = vec![0.0; bins];
        for d in &deltas {
            let mut hit = None;
            for j in 1..=bins {
                let lo = -1.0 + (j - 1) as f64 * 2.0 / bins as f64;
                let hi = -1.0 + j as f64 * 2.0 / bins as f64;
                if lo <= *d && *d < hi {
                    hit = Some(j);
                }
            }
            let j = hit.unwrap_or(bins); // only +1 falls outside every interval
            row[j - 1] += 1.0;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v /= deltas.len() as f64;
            out.insert(format!("fingerprint/{id}/b{}", j + 1), Some(*v));
        }
        out.insert(format!("fingerprint/{id}/n"), Some(deltas.len() as f64));
        fingerprints.insert(id, row);
    }

    // F1
    let positive = space.positive().0;
    let f1_pairs = |scope: Option<Group>| -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for a in anns {
            if let Some(g) = scope {
                if groups[a.annotator_id.as_str()] != g {
                    continue;
                }
            }
            let truth = match config.f1_reference {
                F1Reference::Disaggregated => Some(a.label),
                F1Reference::Gold => gold[a.text_id.as_str()],
            };
            if let Some(t) = truth {
                pairs.push((t.0, argmax(preds.get(&a.text_id).unwrap())));
            }
        }
        pairs
    };
    let total_pairs = f1_pairs(None);
    let total_f1 = (!total_pairs.is_empty()).then(|| f1(&total_pairs, n_labels, config.f1_variant, positive));
    out.insert("f1/total".into(), total_f1);
    for (g, gname) in GROUPS {
        let pairs = f1_pairs(Some(g));
        let v = (!pairs.is_empty()).then(|| f1(&pairs, n_labels, config.f1_variant, positive));
        out.insert(format!("f1/{gname}"), v);
        out.insert(
            format!("f1_delta/{gname}"),
            match (v, total_f1) {
                (Some(v), Some(t)) => Some(v - t),
                _ => None,
            },
        );
    }

    // kappa
    for (gi, (g, gname)) in GROUPS.iter().enumerate() {
        for (hi, (h, hname)) in GROUPS.iter().enumerate() {
            let value = if gi == hi {
                let members: Vec<&str> = corpus
                    .annotators()
                    .iter()
                    .filter(|a| group_of(a) == *g)
                    .map(|a| a.annotator_id.as_str())
                    .collect();
                let mut kappas = Vec::new();
                for x in 0..members.len() {
                    for y in x + 1..members.len() {
                        let mut pairs = Vec::new();
                        for t in &text_ids {
                            let la = anns.iter().find(|a| a.text_id == *t && a.annotator_id == members[x]);
                            let lb = anns.iter().find(|a| a.text_id == *t && a.annotator_id == members[y]);
                            if let (Some(la), Some(lb)) = (la, lb) {
                                pairs.push((la.label.0, lb.label.0));
                            }
                        }
                        if pairs.len() >= 5 {
                            kappas.push(kappa(&pairs, n_labels).unwrap());
                        }
                    }
                }
                mean(&kappas)
            } else {
                let mut pairs = Vec::new();
                for t in &text_ids {
                    let labels_of = |grp: Group| -> Vec<usize> {
                        anns.iter()
                            .filter(|a| a.text_id == *t && groups[a.annotator_id.as_str()] == grp)
                            .map(|a| a.label.0)
                            .collect()
                    };
                    if let (Some(a), Some(b)) = (
                        strict_majority(&labels_of(*g), n_labels),
                        strict_majority(&labels_of(*h), n_labels),
                    ) {
                        pairs.push((a, b));
                    }
                }
                kappa(&pairs, n_labels)
            };
            out.insert(format!("kappa/{gname}/{hname}"), value);
        }
    }

    // cluster profiles and demographic divergence
    let Some((assign, k)) = assignments else {
        out.insert("jsd".into(), None);
        return out;
    };
    let mut means_by_cluster: Vec<Option<f64>> = Vec::new();
    let mut dists = Vec::new();
    let mut sizes = Vec::new();
    for c in 0..k {
        let members: Vec<&str> = assign
            .iter()
            .filter(|(id, cc)| **cc == c && groups.get(id.as_str()).is_some_and(|g| *g != Group::Excluded))
            .map(|(id, _)| id.as_str())
            .collect();
        let size = members.len();
        out.insert(format!("cluster/{c}/size"), Some(size as f64));
        let mut dist = Vec::new();
        for (g, gname) in GROUPS {
            let n = members.iter().filter(|m| groups[**m] == g).count();
            let share = if size > 0 { n as f64 / size as f64 } else { 0.0 };
            out.insert(format!("cluster/{c}/share/{gname}"), Some(share));
            dist.push(share);
            let deltas: Vec<f64> = grouped
                .iter()
                .filter(|r| r.group == g && members.contains(&r.annotator.as_str()))
                .map(|r| r.delta)
                .collect();
            out.insert(format!("cluster/{c}/mean/{gname}"), mean(&deltas));
        }
        let deltas: Vec<f64> = grouped
            .iter()
            .filter(|r| members.contains(&r.annotator.as_str()))
            .map(|r| r.delta)
            .collect();
        let m = mean(&deltas);
        out.insert(format!("cluster/{c}/mean"), m);
        means_by_cluster.push(m);
        dists.push(dist);
        sizes.push(size as f64);
    }
    let present: Vec<f64> = means_by_cluster.iter().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (c, m) in means_by_cluster.iter().enumerate() {
        let norm = m.map(|m| if hi > lo { (m - lo) / (hi - lo) } else { 0.0 });
        out.insert(format!("cluster/{c}/normalized_mean"), norm);
    }
    let total: f64 = sizes.iter().sum();
    let jsd = (total > 0.0).then(|| {
        let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        let smoothed: Vec<Vec<f64>> = dists.iter().map(|d| smooth(d, eps)).collect();
        let mut mixture = [0.0; 4];
        for (w, p) in weights.iter().zip(&smoothed) {
            for i in 0..4 {
                mixture[i] += w * p[i];
            }
        }
        let mut s = 0.0;
        for (w, p) in weights.iter().zip(&smoothed) {
            for i in 0..4 {
                s += w * p[i] * (p[i] / mixture[i]).ln();
            }
        }
        s
    });
    out.insert("jsd".into(), jsd);
    out
}

/// The same keys as [`oracle_metrics`], read off the engine's outputs.
pub fn engine_metrics(corpus: &AnnotationCorpus, eval: &ModelEvaluation) -> MetricBundle {
    let mut out = MetricBundle::new();
    let report = &eval.report;
    let sets = &eval.delta_sets;
    let name = |g: Group| g.as_str();

    for t in corpus.texts() {
        out.insert(format!("gold/{}", t.text_id), corpus.gold_of(&t.text_id).map(|l| l.0 as f64));
    }
    for r in &sets.all.records {
        out.insert(format!("delta/all/{}/{}", r.text_id, r.annotator_id), Some(r.delta));
    }
    for set in sets.groups.values() {
        for r in &set.records {
            out.insert(format!("delta/group/{}/{}", r.text_id, r.annotator_id), Some(r.delta));
        }
    }

    let div = &report.divergence_report;
    out.insert("n/all".into(), Some(div.pool_n as f64));
    out.insert("mean/all".into(), Some(div.total_mean_delta));
    out.insert(
        "mean/all_demographic".into(),
        div.total_mean_delta_demographic_only.value().copied(),
    );
    let tri = div.pool_trinary.as_array();
    for (i, n) in ["neg", "zero", "pos"].iter().enumerate() {
        out.insert(format!("trinary/all/{n}"), Some(tri[i]));
    }
    for (g, entry) in &div.per_group {
        let d = entry.value();
        out.insert(format!("n/{}", name(*g)), Some(sets.groups[g].len() as f64));
        out.insert(format!("mean/{}", name(*g)), d.map(|d| d.mean_delta));
        for (i, n) in ["neg", "zero", "pos"].iter().enumerate() {
            out.insert(format!("trinary/{}/{n}", name(*g)), d.map(|d| d.trinary.as_array()[i]));
        }
        out.insert(format!("kl/{}", name(*g)), d.map(|d| d.kl));
    }

    for (id, row) in &eval.fingerprints.rows {
        for (j, v) in row.bins.iter().enumerate() {
            out.insert(format!("fingerprint/{id}/b{}", j + 1), Some(*v));
        }
        out.insert(format!("fingerprint/{id}/n"), Some(row.n_texts as f64));
    }

    let f1 = &report.f1_report;
    out.insert("f1/total".into(), Some(f1.total_f1));
    for g in Group::DEMOGRAPHIC {
        out.insert(format!("f1/{}", name(g)), f1.group_f1[&g].value().copied());
        out.insert(format!("f1_delta/{}", name(g)), f1.per_group[&g].value().copied());
    }

    let kappas = kappa_matrix(corpus);
    for g in Group::DEMOGRAPHIC {
        for h in Group::DEMOGRAPHIC {
            out.insert(format!("kappa/{}/{}", name(g), name(h)), kappas.get(g, h));
        }
    }

    out.insert("jsd".into(), report.demographic_divergence.value().copied());
    for p in &report.cluster_profiles {
        let c = p.cluster_id;
        out.insert(format!("cluster/{c}/size"), Some(p.size as f64));
        for (gi, g) in Group::DEMOGRAPHIC.iter().enumerate() {
            out.insert(format!("cluster/{c}/share/{}", name(*g)), Some(p.demo_dist[gi]));
            out.insert(
                format!("cluster/{c}/mean/{}", name(*g)),
                p.group_mean_delta[g].value().copied(),
            );
        }
        out.insert(format!("cluster/{c}/mean"), p.mean_delta.value().copied());
        out.insert(
            format!("cluster/{c}/normalized_mean"),
            p.normalized_mean_delta.value().copied(),
        );
    }
    out
}

/// Keys whose values differ by more than `tol`, or that are absent on only
/// one side or missing from one bundle.
pub fn compare_bundles(engine: &MetricBundle, oracle: &MetricBundle, tol: f64) -> Vec<String> {
    let keys: BTreeSet<&String> = engine.keys().chain(oracle.keys()).collect();
    let mut out = Vec::new();
    for key in keys {
        match (engine.get(key), oracle.get(key)) {
            (Some(Some(a)), Some(Some(b))) if (a - b).abs() <= tol => {}
            (Some(None), Some(None)) => {}
            (a, b) => out.push(format!("{key}: engine {a:?}, oracle {b:?}")),
        }
    }
    out
}

/// A random small instance: at most 50 texts and 20 annotators, two or three
/// labels, a sprinkling of excluded annotators, exact-uniform and one-hot
/// predictions, and a randomized run configuration.
pub fn random_instance(seed: u64) -> Result<(AnnotationCorpus, PredictionSet, RunConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labels = rng.random_range(2..=3);
    let space = if n_labels == 2 {
        LabelSpace::hate_speech()
    } else {
        LabelSpace::new(vec!["hate", "offensive", "normal"], Some("normal"))?
    };
    let n_texts = rng.random_range(5..=50);
    let n_annotators = rng.random_range(4..=20);
    let genders = [Gender::Male, Gender::Female, Gender::Other];
    let ethnicities = [Ethnicity::White, Ethnicity::NonWhite, Ethnicity::Other];
    let annotators: Vec<Annotator> = (0..n_annotators)
        .map(|i| {
            let (g, e) = if rng.random::<f64>() < 0.1 {
                (genders[rng.random_range(0..3)], ethnicities[2])
            } else {
                (genders[rng.random_range(0..2)], ethnicities[rng.random_range(0..2)])
            };
            Annotator::new(format!("a{i:02}"), g, e)
        })
        .collect();
    let density = rng.random_range(0.3..=1.0);
    let mut annotations = Vec::new();
    let mut preds = PredictionSet::new(format!("random-{seed}"));
    for t in 0..n_texts {
        let text_id = format!("t{t:02}");
        let lean = rng.random_range(0..n_labels);
        let mut any = false;
        for a in &annotators {
            if rng.random::<f64>() < density {
                any = true;
                let label = if rng.random::<f64>() < 0.7 {
                    lean
                } else {
                    rng.random_range(0..n_labels)
                };
                annotations.push(Annotation {
                    text_id: text_id.clone(),
                    annotator_id: a.annotator_id.clone(),
                    label: LabelId(label),
                });
            }
        }
        if !any {
            annotations.push(Annotation {
                text_id: text_id.clone(),
                annotator_id: annotators[0].annotator_id.clone(),
                label: LabelId(lean),
            });
        }
        let roll = rng.random::<f64>();
        let probs: Vec<f64> = if roll < 0.05 {
            vec![1.0 / n_labels as f64; n_labels]
        } else if roll < 0.1 {
            let mut p = vec![0.0; n_labels];
            p[rng.random_range(0..n_labels)] = 1.0;
            p
        } else {
            let raw: Vec<f64> = (0..n_labels).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        };
        preds.insert(text_id, probs)?;
    }
    let config = RunConfig {
        seed,
        bin_count: [40, 20, 7, 1][rng.random_range(0..4)],
        gold_source: if rng.random() { GoldSource::GlobalMajority } else { GoldSource::GroupMajority },
        f1_variant: if rng.random() { F1Variant::Macro } else { F1Variant::BinaryPositive },
        f1_reference: if rng.random() { F1Reference::Disaggregated } else { F1Reference::Gold },
        tie_policy: if rng.random_bool(0.7) { TiePolicy::TieNegative } else { TiePolicy::TieDrop },
        min_annotations: 1,
        n_init: 3,
        ..Default::default()
    };
    let ingestion = IngestionConfig {
        label_space: space,
        min_annotations: config.min_annotations,
        tie_policy: config.tie_policy,
        include_excluded_in_pool: config.include_excluded_in_pool,
        ..Default::default()
    };
    let corpus = AnnotationCorpus::build(
        RawCorpus {
            annotators,
            annotations,
            ..Default::default()
        },
        &ingestion,
    )?;
    Ok((corpus, preds, config))
}

/// Runs the engine and the oracle on one instance and lists the mismatches.
pub fn check_instance(
    corpus: &AnnotationCorpus,
    preds: &PredictionSet,
    config: &RunConfig,
    tol: f64,
) -> Result<Vec<String>> {
    let eval = crate::pipeline::evaluate_model(corpus, "oracle", preds, config)?;
    let engine = engine_metrics(corpus, &eval);
    let assignments = eval.clustering.as_ref().map(|c| (&c.assignments, c.k()));
    let oracle = oracle_metrics(corpus, preds, config, assignments);
    Ok(compare_bundles(&engine, &oracle, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TextRecord;

    #[test]
    fn worked_two_annotation_corpus() {
        let space = LabelSpace::new(vec!["hate", "not_hate"], Some("hate")).unwrap();
        let raw = RawCorpus {
            texts: vec![TextRecord { text_id: "t1".into(), content: None }],
            annotators: vec![
                Annotator::new("wm1", Gender::Male, Ethnicity::White),
                Annotator::new("nwf1", Gender::Female, Ethnicity::NonWhite),
            ],
            annotations: vec![
                Annotation { text_id: "t1".into(), annotator_id: "wm1".into(), label: LabelId(0) },
                Annotation { text_id: "t1".into(), annotator_id: "nwf1".into(), label: LabelId(1) },
            ],
            ..Default::default()
        };
        let config = IngestionConfig { label_space: space, min_annotations: 1, ..Default::default() };
        let corpus = AnnotationCorpus::build(raw, &config).unwrap();
        let mut preds = PredictionSet::new("m");
        preds.insert("t1", vec![0.9, 0.1]).unwrap();
        let bundle = oracle_metrics(&corpus, &preds, &RunConfig::default(), None);
        assert!((bundle["mean/all"].unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(bundle["jsd"], None);
    }

    #[test]
    fn empty_overlap_kappa_is_absent_on_both_sides() {
        // wm and nwf never annotate the same text
        let annotators = vec![
            Annotator::new("w1", Gender::Male, Ethnicity::White),
            Annotator::new("w2", Gender::Male, Ethnicity::White),
            Annotator::new("n1", Gender::Female, Ethnicity::NonWhite),
            Annotator::new("n2", Gender::Female, Ethnicity::NonWhite),
        ];
        let mut annotations = Vec::new();
        for t in 0..6 {
            let (a, b) = if t % 2 == 0 { ("w1", "w2") } else { ("n1", "n2") };
            for id in [a, b] {
                annotations.push(Annotation {
                    text_id: format!("t{t}"),
                    annotator_id: id.into(),
                    label: LabelId(t % 2),
                });
            }
        }
        let raw = RawCorpus { annotators, annotations, ..Default::default() };
        let config = IngestionConfig { min_annotations: 1, ..Default::default() };
        let corpus = AnnotationCorpus::build(raw, &config).unwrap();
        let mut preds = PredictionSet::new("m");
        for t in 0..6 {
            preds.insert(format!("t{t}"), vec![0.6, 0.4]).unwrap();
        }
        let cfg = RunConfig { min_annotations: 1, ..Default::default() };
        let oracle = oracle_metrics(&corpus, &preds, &cfg, None);
        assert_eq!(oracle["kappa/wm/nwf"], None);
        assert_eq!(kappa_matrix(&corpus).get(Group::Wm, Group::Nwf), None);
        assert!(check_instance(&corpus, &preds, &cfg, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn engine_matches_oracle_on_random_instances() {
        for seed in 0..25 {
            let (corpus, preds, config) = random_instance(seed).unwrap();
            let diffs = check_instance(&corpus, &preds, &config, 1e-9).unwrap();
            assert!(diffs.is_empty(), "seed {seed}: {diffs:#?}");
        }
    }
}
