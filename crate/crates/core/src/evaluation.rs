//! Zero-shot decoding, ranking metrics, modality-gap statistics and the
//! MI/accuracy correlation analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{write_f32, write_i32, write_json};
use crate::encoders::l2_normalize;
use crate::error::{Error, Result};
use crate::feature_io::{split_seen_unseen, FeaturePack, PackView};
use crate::prototypes::PrototypeBank;
use crate::training::{History, MainNet, TrainState};

/// Unit-norm class templates, rows sorted by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub z: Array2<f64>,
    pub class_ids: Vec<usize>,
}

impl TemplateSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Encodes one visual row per class into templates.
pub fn build_templates(net: &MainNet, visual_rows: ArrayView2<f64>, class_ids: &[usize]) -> Result<TemplateSet> {
    if visual_rows.nrows() != class_ids.len() {
        return Err(Error::dim(format!(
            "{} template rows for {} class ids",
            visual_rows.nrows(),
            class_ids.len()
        )));
    }
    let distinct: BTreeSet<_> = class_ids.iter().collect();
    if distinct.len() != class_ids.len() {
        return Err(Error::config("duplicate class ids in template set"));
    }
    let mut order: Vec<usize> = (0..class_ids.len()).collect();
    order.sort_by_key(|&i| class_ids[i]);
    let z = net.encode_visual(visual_rows.select(Axis(0), &order).view())?;
    Ok(TemplateSet {
        z,
        class_ids: order.iter().map(|&i| class_ids[i]).collect(),
    })
}

/// Per-class mean of the raw visual rows of a view; the template source
/// when a class has several images.
pub fn class_visual_means(view: &PackView<'_>) -> (Array2<f64>, Vec<usize>) {
    let batch = view.to_batch();
    let classes = view.classes();
    let mut out = Array2::zeros((classes.len(), batch.h_v.ncols()));
    for (i, &c) in classes.iter().enumerate() {
        let idx: Vec<usize> = batch.y.iter().enumerate().filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
        let mean = batch.h_v.select(Axis(0), &idx).mean_axis(Axis(0)).expect("class has rows");
        out.row_mut(i).assign(&mean);
    }
    (out, classes)
}

/// Index of the maximum, ties toward the lowest index.
fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Cosine scores `[n × U]` between encoded neural rows and templates, and
/// the argmax class id per row.
pub fn zero_shot_predict(
    net: &MainNet,
    neural_rows: ArrayView2<f64>,
    templates: &TemplateSet,
) -> Result<(Vec<usize>, Array2<f64>)> {
    let z_b = net.encode_neural(neural_rows)?;
    if z_b.ncols() != templates.z.ncols() {
        return Err(Error::dim("neural encoding and templates differ in width"));
    }
    let scores = similarity_matrix(z_b.view(), templates.z.view());
    let preds = scores
        .rows()
        .into_iter()
        .map(|r| templates.class_ids[argmax(r)])
        .collect();
    Ok((preds, scores))
}

/// 0-based rank of column `col` within `row` (descending, ties by index).
fn rank_of(row: ArrayView1<f64>, col: usize) -> usize {
    let s = row[col];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < col))
        .count()
}

/// Fraction of rows whose true class ranks among the top `k` columns.
pub fn top_k_accuracy(scores: ArrayView2<f64>, class_ids: &[usize], true_ids: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > scores.ncols() {
        return Err(Error::config(format!("k = {k} exceeds {} templates", scores.ncols())));
    }
    if scores.nrows() != true_ids.len() || scores.ncols() != class_ids.len() {
        return Err(Error::dim("score matrix does not match labels"));
    }
    if true_ids.is_empty() {
        return Ok(0.0);
    }
    let col_of: BTreeMap<usize, usize> = class_ids.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut hits = 0usize;
    for (row, t) in scores.rows().into_iter().zip(true_ids) {
        let col = *col_of
            .get(t)
            .ok_or_else(|| Error::Index(format!("true class {t} has no template")))?;
        if rank_of(row, col) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / true_ids.len() as f64)
}

/// Pairwise dot products of unit rows.
pub fn similarity_matrix(z_a: ArrayView2<f64>, z_b: ArrayView2<f64>) -> Array2<f64> {
    z_a.dot(&z_b.t())
}

/// Top-`k` template indices per row, best first.
pub fn retrieval_topk(scores: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > scores.ncols() {
        return Err(Error::config(format!("k = {k} outside [1, {}]", scores.ncols())));
    }
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("series lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-value for `pearson(x, y)`.
pub fn pearson_permutation_p(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    let r = pearson(x, y)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled)?.abs() >= r - 1e-12 {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (permutations + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiAccuracy {
    pub r_top1: f64,
    pub r_top5: f64,
}

/// Correlation between the per-epoch probe MI and accuracy within one run.
pub fn mi_accuracy_analysis(history: &History) -> Result<MiAccuracy> {
    let mi: Vec<f64> = history.epochs.iter().map(|e| e.probe_mi).collect();
    let top1: Vec<f64> = history.epochs.iter().map(|e| e.top1).collect();
    let top5: Vec<f64> = history.epochs.iter().map(|e| e.top5).collect();
    Ok(MiAccuracy {
        r_top1: pearson(&mi, &top1)?,
        r_top5: pearson(&mi, &top5)?,
    })
}

/// Last-`window`-epoch means of (probe MI, top-1, top-5) for one run.
pub fn window_means(history: &History, window: usize) -> Result<(f64, f64, f64)> {
    if window == 0 || history.epochs.is_empty() {
        return Err(Error::config("window and history must be non-empty"));
    }
    let tail = &history.epochs[history.epochs.len().saturating_sub(window)..];
    let n = tail.len() as f64;
    Ok((
        tail.iter().map(|e| e.probe_mi).sum::<f64>() / n,
        tail.iter().map(|e| e.top1).sum::<f64>() / n,
        tail.iter().map(|e| e.top5).sum::<f64>() / n,
    ))
}

/// Correlation across runs between windowed probe MI and windowed accuracy.
pub fn inter_run_analysis(histories: &[History], window: usize) -> Result<MiAccuracy> {
    let means = histories
        .iter()
        .map(|h| window_means(h, window))
        .collect::<Result<Vec<_>>>()?;
    let mi: Vec<f64> = means.iter().map(|m| m.0).collect();
    let top1: Vec<f64> = means.iter().map(|m| m.1).collect();
    let top5: Vec<f64> = means.iter().map(|m| m.2).collect();
    Ok(MiAccuracy {
        r_top1: pearson(&mi, &top1)?,
        r_top5: pearson(&mi, &top5)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-class mean and (population) std of `‖z_v,i − c_k‖₂`.
pub fn gap_stats(z_v: ArrayView2<f64>, labels: &[usize], bank: &PrototypeBank) -> Result<BTreeMap<usize, GapStat>> {
    if z_v.nrows() != labels.len() {
        return Err(Error::dim(format!("{} rows but {} labels", z_v.nrows(), labels.len())));
    }
    if z_v.ncols() != bank.dim() {
        return Err(Error::dim("features and prototypes differ in width"));
    }
    let mut dists: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (row, &y) in z_v.rows().into_iter().zip(labels) {
        if y >= bank.num_classes() {
            return Err(Error::Index(format!("class {y} outside bank")));
        }
        let d = (&row - &bank.center(y)).mapv(|x| x * x).sum().sqrt();
        dists.entry(y).or_default().push(d);
    }
    Ok(dists
        .into_iter()
        .map(|(k, d)| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (k, GapStat { mean, std: var.sqrt(), count: d.len() })
        })
        .collect())
}

/// Mean over classes of the per-class mean and std.
pub fn mean_gap(gaps: &BTreeMap<usize, GapStat>) -> (f64, f64) {
    if gaps.is_empty() {
        return (0.0, 0.0);
    }
    let n = gaps.len() as f64;
    (
        gaps.values().map(|g| g.mean).sum::<f64>() / n,
        gaps.values().map(|g| g.std).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: u64,
    pub top1: f64,
    pub top5: f64,
    pub class_ids: Vec<usize>,
    pub per_class: BTreeMap<usize, f64>,
    /// `confusion[i][j]`: rows of class `class_ids[i]` predicted as `class_ids[j]`.
    pub confusion: Vec<Vec<u64>>,
    pub similarity_matrix: Option<String>,
    pub gaps: BTreeMap<usize, GapStat>,
}

/// Zero-shot evaluation of `state` on a view of unseen classes, with class
/// templates from the per-class mean visual row.
pub fn evaluate_view(state: &TrainState, test: &PackView<'_>) -> Result<EvalReport> {
    let (report, _) = evaluate_with_scores(state, test)?;
    Ok(report)
}

fn evaluate_with_scores(state: &TrainState, test: &PackView<'_>) -> Result<(EvalReport, Array2<f64>)> {
    if test.is_empty() {
        return Err(Error::config("empty evaluation view"));
    }
    let (rows, ids) = class_visual_means(test);
    let templates = build_templates(&state.net, rows.view(), &ids)?;
    let batch = test.to_batch();
    let (preds, scores) = zero_shot_predict(&state.net, batch.x_b.view(), &templates)?;
    let u = templates.len();
    let top1 = top_k_accuracy(scores.view(), &templates.class_ids, &batch.y, 1)?;
    let top5 = top_k_accuracy(scores.view(), &templates.class_ids, &batch.y, 5.min(u))?;

    let col_of: BTreeMap<usize, usize> = templates.class_ids.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut confusion = vec![vec![0u64; u]; u];
    for (&t, &p) in batch.y.iter().zip(&preds) {
        confusion[col_of[&t]][col_of[&p]] += 1;
    }
    let per_class = templates
        .class_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let total: u64 = confusion[i].iter().sum();
            (c, if total == 0 { 0.0 } else { confusion[i][i] as f64 / total as f64 })
        })
        .collect();
    Ok((
        EvalReport {
            epoch: state.epoch,
            top1,
            top5,
            class_ids: templates.class_ids.clone(),
            per_class,
            confusion,
            similarity_matrix: None,
            gaps: BTreeMap::new(),
        },
        scores,
    ))
}

fn matrix_csv(m: ArrayView2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct EmbeddingManifest {
    version: u32,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    files: BTreeMap<&'static str, &'static str>,
}

/// Full evaluation of a trained state on a pack, writing every artifact to
/// `dir`: `eval.json`, `eval.csv`, `per_class.csv`, `confusion.csv`,
/// `simmat.csv`, `retrieval.csv`, `gaps.csv` and the semantic embeddings.
pub fn write_eval_artifacts(state: &TrainState, pack: &FeaturePack, dir: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train, test) = split_seen_unseen(pack)?;
    let (mut report, scores) = evaluate_with_scores(state, &test)?;

    let test_batch = test.to_batch();
    let z_v = state.net.encode_visual(test_batch.h_v.view())?;
    let z_b = state.net.encode_neural(test_batch.x_b.view())?;

    // class-level representational similarity: mean neural feature vs template
    let (rows, ids) = class_visual_means(&test);
    let templates = build_templates(&state.net, rows.view(), &ids)?;
    let mut neural_means = Array2::zeros((ids.len(), z_b.ncols()));
    for (i, &c) in ids.iter().enumerate() {
        let idx: Vec<usize> = test_batch.y.iter().enumerate().filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
        neural_means.row_mut(i).assign(&z_b.select(Axis(0), &idx).mean_axis(Axis(0)).expect("non-empty"));
    }
    let simmat = similarity_matrix(l2_normalize(neural_means.view()).view(), templates.z.view());
    write_text(&dir.join("simmat.csv"), &matrix_csv(simmat.view()))?;
    report.similarity_matrix = Some("simmat.csv".into());

    let k = 5.min(templates.len());
    let mut retrieval = String::from("row,label");
    for i in 1..=k {
        retrieval.push_str(&format!(",rank{i}"));
    }
    retrieval.push('\n');
    for (i, ranked) in retrieval_topk(scores.view(), k)?.iter().enumerate() {
        retrieval.push_str(&format!("{i},{}", test_batch.y[i]));
        for &j in ranked {
            retrieval.push_str(&format!(",{}", templates.class_ids[j]));
        }
        retrieval.push('\n');
    }
    write_text(&dir.join("retrieval.csv"), &retrieval)?;

    let train_batch = train.to_batch();
    let z_train = state.net.encode_visual(train_batch.h_v.view())?;
    report.gaps = gap_stats(z_train.view(), &train_batch.y, &state.bank)?;
    let mut gaps = String::from("class,mean,std,count\n");
    for (c, g) in &report.gaps {
        gaps.push_str(&format!("{c},{},{},{}\n", g.mean, g.std, g.count));
    }
    write_text(&dir.join("gaps.csv"), &gaps)?;

    write_text(
        &dir.join("eval.csv"),
        &format!("epoch,top1,top5\n{},{},{}\n", report.epoch, report.top1, report.top5),
    )?;
    let mut per_class = String::from("class,accuracy\n");
    for (c, a) in &report.per_class {
        per_class.push_str(&format!("{c},{a}\n"));
    }
    write_text(&dir.join("per_class.csv"), &per_class)?;
    let mut confusion = String::new();
    for row in &report.confusion {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        confusion.push_str(&line.join(","));
        confusion.push('\n');
    }
    write_text(&dir.join("confusion.csv"), &confusion)?;

    write_f32(&dir.join("embeddings_visual.f32"), z_v.iter().map(|&x| x as f32))?;
    write_f32(&dir.join("embeddings_neural.f32"), z_b.iter().map(|&x| x as f32))?;
    write_i32(&dir.join("embeddings_labels.i32"), test_batch.y.iter().map(|&y| y as i32))?;
    write_json(
        &dir.join("embeddings.json"),
        &EmbeddingManifest {
            version: 1,
            n: z_v.nrows(),
            d: z_v.ncols(),
            files: BTreeMap::from([
                ("visual", "embeddings_visual.f32"),
                ("neural", "embeddings_neural.f32"),
                ("labels", "embeddings_labels.i32"),
            ]),
        },
    )?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Mode, TrainConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn clip_net(dim: usize) -> MainNet {
        let cfg = TrainConfig {
            mode: Mode::ClipCon,
            backbone: crate::training::BackboneKind::Identity,
            d_joint: dim,
            hidden: Some(3),
            ..TrainConfig::default()
        };
        TrainState::new(&cfg, dim, dim, 4).unwrap().net
    }

    #[test]
    fn templates_are_unit_and_sorted() {
        let net = clip_net(3);
        let rows = array![[0.0, 2.0, 0.0], [3.0, 0.0, 4.0]];
        let t = build_templates(&net, rows.view(), &[9, 2]).unwrap();
        assert_eq!(t.class_ids, vec![2, 9]);
        assert!((t.z[[0, 0]] - 0.6).abs() < 1e-15);
        for r in t.z.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        assert!(build_templates(&net, rows.view(), &[1, 1]).is_err());
    }

    #[test]
    fn thingseeg_template_count() {
        let net = clip_net(4);
        let rows = Array2::from_shape_fn((200, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 + 1.0);
        let ids: Vec<usize> = (1654..1854).collect();
        assert_eq!(build_templates(&net, rows.view(), &ids).unwrap().len(), 200);
    }

    #[test]
    fn top_k_edges() {
        let s = array![[0.9, 0.1, 0.0], [0.2, 0.8, 0.1], [0.0, 0.3, 0.7]];
        let ids = [0, 1, 2];
        assert_eq!(top_k_accuracy(s.view(), &ids, &[0, 1, 2], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(s.view(), &ids, &[2, 2, 0], 3).unwrap(), 1.0);
        assert!((top_k_accuracy(s.view(), &ids, &[1, 0, 2], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(top_k_accuracy(s.view(), &ids, &[0, 1, 2], 4).is_err());
        assert!(top_k_accuracy(s.view(), &ids, &[0, 1, 2], 0).is_err());
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let s = array![[0.5, 0.5, 0.5]];
        assert_eq!(top_k_accuracy(s.view(), &[0, 1, 2], &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(s.view(), &[0, 1, 2], &[1], 1).unwrap(), 0.0);
        assert_eq!(retrieval_topk(s.view(), 3).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(argmax(s.row(0)), 0);
    }

    #[test]
    fn self_similarity_predicts_template() {
        let net = clip_net(3);
        let rows = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = build_templates(&net, rows.view(), &[4, 5, 6]).unwrap();
        // identity backbone; encode the neural side so it lands on a template
        let z = net.encode_neural(rows.view()).unwrap();
        let t2 = TemplateSet { z, class_ids: t.class_ids.clone() };
        let (pred, scores) = zero_shot_predict(&net, rows.view(), &t2).unwrap();
        assert_eq!(pred, vec![4, 5, 6]);
        assert!(scores.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn template_scale_invariance() {
        let net = clip_net(3);
        let rows = array![[1.0, 0.2, -0.3], [0.1, 1.0, 0.5], [-0.4, 0.3, 1.0]];
        let neural = array![[0.5, 0.1, 0.2], [0.0, 0.3, -1.0]];
        let a = build_templates(&net, rows.view(), &[0, 1, 2]).unwrap();
        let b = build_templates(&net, (&rows * 5.0).view(), &[0, 1, 2]).unwrap();
        assert_eq!(
            zero_shot_predict(&net, neural.view(), &a).unwrap().0,
            zero_shot_predict(&net, neural.view(), &b).unwrap().0
        );
    }

    #[test]
    fn similarity_matrix_properties() {
        let z = l2_normalize(array![[1.0, 2.0], [-3.0, 1.0], [0.5, 0.5]].view());
        let s = similarity_matrix(z.view(), z.view());
        for i in 0..3 {
            assert!((s[[i, i]] - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert_eq!(s[[i, j]], s[[j, i]]);
                assert!(s[[i, j]].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn retrieval_head_matches_prediction() {
        let s = array![[0.1, 0.9, 0.4, 0.3], [0.8, 0.2, 0.85, 0.0]];
        let r = retrieval_topk(s.view(), 3).unwrap();
        assert_eq!(r, vec![vec![1, 2, 3], vec![2, 0, 1]]);
        for (row, ranked) in s.rows().into_iter().zip(&r) {
            assert_eq!(ranked[0], argmax(row));
            assert!(ranked.windows(2).all(|w| row[w[0]] >= row[w[1]]));
        }
        assert!(retrieval_topk(s.view(), 5).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[5.0, 7.0, 9.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[2.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn permutation_p_value() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let p = pearson_permutation_p(&x, &y, 999, 1).unwrap();
        assert!(p <= 0.002, "{p}");
        let noise = [0.3, -1.2, 0.8, 0.1, -0.5, 1.1, -0.9, 0.4, 0.0, -0.2, 0.7, -0.6];
        assert!(pearson_permutation_p(&x, &noise, 999, 1).unwrap() > 0.05);
    }

    #[test]
    fn co_monotone_history_correlates() {
        use crate::training::EpochSummary;
        let epochs = (0..6)
            .map(|e| EpochSummary {
                epoch: e,
                l_con: 0.0,
                l_mi: 0.0,
                l_recon: 0.0,
                l_intra: 0.0,
                l_loglikeli: 0.0,
                l_total: 0.0,
                probe_mi: 0.1 * e as f64,
                l_mi_v: 0.0,
                l_mi_b: 0.0,
                top1: 0.05 * e as f64 + 0.01 * (e % 2) as f64,
                top5: 0.1 * e as f64,
                gap_mean: 0.0,
                gap_std: 0.0,
            })
            .collect();
        let h = History { steps: vec![], epochs };
        let r = mi_accuracy_analysis(&h).unwrap();
        assert!(r.r_top1 > 0.0 && (r.r_top5 - 1.0).abs() < 1e-12);
        let (mi, t1, _) = window_means(&h, 10).unwrap();
        assert!((mi - 0.25).abs() < 1e-12 && t1 > 0.0);
    }

    #[test]
    fn gap_stats_examples() {
        let mut bank = PrototypeBank::init(2, 2, 0.5, 0).unwrap();
        bank.centers = array![[0.0, 0.0], [1.0, 0.0]];
        let z = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 1.0]];
        let g = gap_stats(z.view(), &[0, 0, 0, 1], &bank).unwrap();
        assert_eq!(g[&0].std, 0.0);
        assert_eq!(g[&0].mean, 1.0);
        assert_eq!((g[&1].std, g[&1].count), (0.0, 1));
        assert_eq!(mean_gap(&g), (1.0, 0.0));
        assert!(gap_stats(z.view(), &[0, 0, 2, 1], &bank).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
            }
        }

        #[test]
        fn top_k_monotone_in_k(vals in prop::collection::vec(-1.0f64..1.0, 20), truth in prop::collection::vec(0usize..5, 4)) {
            let s = Array2::from_shape_vec((4, 5), vals).unwrap();
            let ids = [0, 1, 2, 3, 4];
            let acc: Vec<f64> = (1..=5).map(|k| top_k_accuracy(s.view(), &ids, &truth, k).unwrap()).collect();
            prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(acc[4], 1.0);
        }
    }
}
