//! Unsupervised real/fake separation from encoder features: 2-D embedding,
//! two-cluster k-means, and labeling through a single known sample.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locator::LocatorNetwork;
use crate::rng::{stream_rng, streams};
use crate::texturegen::{Label, SamplePair};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `N x D`.
    pub vectors: Array2<f64>,
    pub ids: Vec<String>,
    /// Ground truth, withheld from clustering and used for scoring only.
    pub labels: Option<Vec<Label>>,
}

impl FeatureSet {
    pub fn new(vectors: Array2<f64>, ids: Vec<String>, labels: Option<Vec<Label>>) -> Result<Self> {
        let (n, d) = vectors.dim();
        if d == 0 {
            return Err(Error::invalid("features", "dimension must be >= 1"));
        }
        if ids.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::invalid("features", "ids/labels do not match row count"));
        }
        Ok(Self { vectors, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn extract_features(net: &LocatorNetwork, samples: &[SamplePair]) -> Result<FeatureSet> {
    let d = net.config().feature_len();
    let mut vectors = Array2::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        let f = net.features(&s.input)?;
        vectors.row_mut(i).assign(&Array1::from(f));
    }
    FeatureSet::new(
        vectors,
        samples.iter().map(|s| s.id.clone()).collect(),
        Some(samples.iter().map(|s| s.label).collect()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Reducer {
    /// t-SNE with the default perplexity rule, PCA when N is too small for it.
    Auto,
    Tsne { perplexity: f64, iterations: usize },
    Pca,
}

impl Default for Reducer {
    fn default() -> Self {
        Reducer::Auto
    }
}

pub const TSNE_ITERATIONS: usize = 1000;

pub fn default_perplexity(n: usize) -> f64 {
    (30.0f64).min((n as f64 - 1.0) / 3.0)
}

/// `N x 2` embedding with the default reducer.
pub fn embed_2d(features: &FeatureSet, seed: u64) -> Result<Array2<f64>> {
    embed_with(features, Reducer::Auto, seed)
}

pub fn embed_with(features: &FeatureSet, reducer: Reducer, seed: u64) -> Result<Array2<f64>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("features", "need at least 2 samples to embed"));
    }
    match reducer {
        Reducer::Pca => Ok(pca_2d(&features.vectors)),
        Reducer::Auto => {
            let perp = default_perplexity(n);
            if perp < 2.0 {
                Ok(pca_2d(&features.vectors))
            } else {
                Ok(tsne(&features.vectors, perp, TSNE_ITERATIONS, seed))
            }
        }
        Reducer::Tsne { perplexity, iterations } => {
            if !(perplexity > 0.0 && perplexity < n as f64) {
                return Err(Error::invalid("perplexity", format!("{perplexity} not in (0, {n})")));
            }
            Ok(tsne(&features.vectors, perplexity, iterations, seed))
        }
    }
}

/// Projection onto the two leading principal components, via the Gram matrix.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let xc = x - &mean;
    let gram = xc.dot(&xc.t());
    let mut out = Array2::zeros((n, 2));
    let mut deflated = gram;
    for comp in 0..2 {
        let (val, vec) = power_iteration(&deflated);
        if val <= 1e-12 {
            break;
        }
        // Scores of the principal component are sqrt(lambda) * u.
        let s = val.sqrt();
        for i in 0..n {
            out[[i, comp]] = s * vec[i];
        }
        for i in 0..n {
            for j in 0..n {
                deflated[[i, j]] -= val * vec[i] * vec[j];
            }
        }
    }
    out
}

fn power_iteration(m: &Array2<f64>) -> (f64, Array1<f64>) {
    let n = m.nrows();
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64) * 1e-3);
    v /= v.dot(&v).sqrt();
    let mut val = 0.0;
    for _ in 0..500 {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next = &w / norm;
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        val = v.dot(&m.dot(&v));
        if delta < 1e-12 {
            break;
        }
    }
    (val, v)
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Conditional affinities with per-point bandwidth found by bisection on entropy.
fn affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut beta = 1.0;
        let scale = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d2[[i, j]] - scale) * beta).exp() };
                sum += row[j];
            }
            let mut h = 0.0;
            if sum > 0.0 {
                for j in 0..n {
                    row[j] /= sum;
                    if row[j] > 1e-300 {
                        h -= row[j] * row[j].ln();
                    }
                }
            }
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    p
}

/// Exact t-SNE with early exaggeration, momentum, and per-coordinate gains.
pub fn tsne(x: &Array2<f64>, perplexity: f64, iterations: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let d2 = squared_distances(x);
    let cond = affinities(&d2, perplexity);
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((cond[[i, j]] + cond[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = stream_rng(seed, streams::CLUSTER, 0);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let lr = (n as f64 / 12.0).max(50.0).min(200.0);
    let exaggeration_iters = 250.min(iterations / 4);
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));
    for it in 0..iterations {
        let exaggeration = if it < exaggeration_iters { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_iters { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = v;
                num[[j, i]] = v;
                qsum += 2.0 * v;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / qsum).max(1e-12);
                let m = (exaggeration * p[[i, j]] - q) * num[[i, j]];
                g0 += m * (y[[i, 0]] - y[[j, 0]]);
                g1 += m * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *u = momentum * *u - lr * *gain * *g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
    }
    y
}

pub const KMEANS_MAX_ITER: usize = 300;

/// k-means with k = 2 and k-means++ seeding; returns cluster ids in {0, 1}.
pub fn two_means(points: &Array2<f64>, seed: u64) -> Result<Vec<u8>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::invalid("points", "need at least 2 points"));
    }
    let mut rng = stream_rng(seed, streams::CLUSTER, 1);
    let d2 = |a: ndarray::ArrayView1<'_, f64>, b: &Array1<f64>| (&a - b).mapv(|v| v * v).sum();
    let first = points.row(rng.gen_range(0..n)).to_owned();
    let weights: Vec<f64> = points.rows().into_iter().map(|r| d2(r, &first)).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Data("all points are identical; second cluster is empty".into()));
    }
    let mut pick = rng.gen::<f64>() * total;
    let mut second_idx = n - 1;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 && pick < *w {
            second_idx = i;
            break;
        }
        pick -= w;
    }
    let mut centers = [first, points.row(second_idx).to_owned()];
    let mut assign = vec![u8::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<u8> = points
            .rows()
            .into_iter()
            .map(|r| u8::from(d2(r, &centers[1]) < d2(r, &centers[0])))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] as usize == c).collect();
            if members.is_empty() {
                return Err(Error::Data("k-means produced an empty cluster".into()));
            }
            *center = points.select(Axis(0), &members).mean_axis(Axis(0)).expect("non-empty");
        }
    }
    Ok(assign)
}

/// The anchor's cluster takes `anchor_label`, the other cluster the opposite.
pub fn single_sample_assign(assignment: &[u8], anchor: usize, anchor_label: Label) -> Result<Vec<Label>> {
    if anchor >= assignment.len() {
        return Err(Error::invalid("anchor", format!("{anchor} out of range")));
    }
    if !assignment.contains(&0) || !assignment.contains(&1) {
        return Err(Error::Data("a cluster is empty".into()));
    }
    let c = assignment[anchor];
    Ok(assignment
        .iter()
        .map(|&a| if a == c { anchor_label } else { anchor_label.flipped() })
        .collect())
}

pub fn accuracy(pred: &[Label], truth: &[Label]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRun {
    pub anchor: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub runs: Vec<ClusterRun>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub reducer: Reducer,
    pub perplexity: f64,
    pub iterations: usize,
    /// Embedding and labels of the first run, for plotting.
    pub embedding: Vec<[f64; 2]>,
    pub assigned: Vec<Label>,
    pub ids: Vec<String>,
    pub truth: Option<Vec<Label>>,
}

impl ClusterReport {
    /// `id,x,y,true_label,assigned_label`.
    pub fn embedding_csv(&self) -> String {
        let mut out = String::from("id,x,y,true_label,assigned_label\n");
        for (i, id) in self.ids.iter().enumerate() {
            let truth = self.truth.as_ref().map(|t| label_name(t[i])).unwrap_or("");
            out.push_str(&format!(
                "{id},{},{},{truth},{}\n",
                self.embedding[i][0],
                self.embedding[i][1],
                label_name(self.assigned[i])
            ));
        }
        out
    }
}

fn label_name(l: Label) -> &'static str {
    if l.is_fake() {
        "fake"
    } else {
        "real"
    }
}

/// Repeats embed, cluster, and anchor assignment `runs` times with fresh seeds
/// and uniformly drawn anchors. The anchor's label comes from the ground
/// truth; without ground truth it is taken as fake and no accuracy is scored.
pub fn clustered_accuracy(features: &FeatureSet, runs: usize, seed: u64) -> Result<ClusterReport> {
    if runs == 0 {
        return Err(Error::invalid("runs", "must be >= 1"));
    }
    let n = features.len();
    let mut out_runs = Vec::with_capacity(runs);
    let mut first: Option<(Array2<f64>, Vec<Label>)> = None;
    for r in 0..runs {
        let mut rng = stream_rng(seed, streams::CLUSTER, 100 + r as u64);
        let emb = embed_2d(features, rng.gen())?;
        let assign = two_means(&emb, rng.gen())?;
        let anchor = rng.gen_range(0..n);
        let anchor_label = features.labels.as_ref().map_or(Label::Fake, |l| l[anchor]);
        let labels = single_sample_assign(&assign, anchor, anchor_label)?;
        let acc = features.labels.as_ref().map(|t| accuracy(&labels, t));
        out_runs.push(ClusterRun { anchor, accuracy: acc });
        if first.is_none() {
            first = Some((emb, labels));
        }
    }
    let accs: Vec<f64> = out_runs.iter().filter_map(|r| r.accuracy).collect();
    let (mean, std) = if accs.is_empty() {
        (None, None)
    } else {
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        let v = accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    let (emb, assigned) = first.expect("runs >= 1");
    let perp = default_perplexity(n);
    Ok(ClusterReport {
        runs: out_runs,
        mean,
        std,
        reducer: if perp < 2.0 { Reducer::Pca } else { Reducer::Auto },
        perplexity: perp,
        iterations: TSNE_ITERATIONS,
        embedding: emb.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        assigned,
        ids: features.ids.clone(),
        truth: features.labels.clone(),
    })
}

/// Best margin of a separating line between the two classes of a 2-D point
/// set, normalized by the embedding diameter; positive iff separable.
pub fn separation_margin(points: &Array2<f64>, labels: &[Label]) -> f64 {
    let diameter = {
        let d2 = squared_distances(points);
        d2.iter().cloned().fold(0.0, f64::max).sqrt().max(1e-12)
    };
    let steps = 3600;
    let mut best = f64::NEG_INFINITY;
    for k in 0..steps {
        let th = std::f64::consts::PI * k as f64 / steps as f64;
        let (c, s) = (th.cos(), th.sin());
        let (mut fmin, mut fmax, mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (row, l) in points.rows().into_iter().zip(labels) {
            let v = row[0] * c + row[1] * s;
            if l.is_fake() {
                fmin = fmin.min(v);
                fmax = fmax.max(v);
            } else {
                rmin = rmin.min(v);
                rmax = rmax.max(v);
            }
        }
        best = best.max(fmin - rmax).max(rmin - fmax);
    }
    best / diameter
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n_each: usize, d: usize, sigma: f64, gap: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let n = 2 * n_each;
        let shift = gap / (d as f64).sqrt();
        let v = Array2::from_shape_fn((n, d), |(i, _)| if i < n_each { 0.0 } else { shift } + normal.sample(&mut rng));
        let labels = (0..n).map(|i| if i < n_each { Label::Real } else { Label::Fake }).collect();
        FeatureSet::new(v, (0..n).map(|i| format!("s{i}")).collect(), Some(labels)).unwrap()
    }

    fn agreement(a: &[u8], truth: &[u8]) -> f64 {
        let same = a.iter().zip(truth).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
        same.max(1.0 - same)
    }

    #[test]
    fn two_means_examples() {
        let p = array![[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 10.1]];
        let a = two_means(&p, 3).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        let a = two_means(&array![[0.0, 0.0], [1.0, 1.0]], 0).unwrap();
        assert_ne!(a[0], a[1]);
        assert!(two_means(&array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]], 0).is_err());
    }

    #[test]
    fn two_means_recovers_blobs() {
        let f = blobs(100, 2, 0.5, 10.0, 1);
        let a = two_means(&f.vectors, 4).unwrap();
        let truth: Vec<u8> = (0..200).map(|i| u8::from(i >= 100)).collect();
        assert!(agreement(&a, &truth) >= 0.99);
    }

    #[test]
    fn single_sample_assign_examples() {
        let assign = [0, 0, 1, 1];
        let l = single_sample_assign(&assign, 0, Label::Fake).unwrap();
        assert_eq!(l, vec![Label::Fake, Label::Fake, Label::Real, Label::Real]);
        let flipped = single_sample_assign(&assign, 0, Label::Real).unwrap();
        assert!(l.iter().zip(&flipped).all(|(a, b)| *a == b.flipped()));
        assert!(single_sample_assign(&[0, 0], 0, Label::Fake).is_err());
        assert!(single_sample_assign(&assign, 9, Label::Fake).is_err());
    }

    #[test]
    fn embedding_contracts() {
        let f = blobs(1, 5, 0.1, 10.0, 2);
        assert_eq!(embed_2d(&f, 0).unwrap().dim(), (2, 2));
        let one = FeatureSet::new(Array2::ones((1, 3)), vec!["a".into()], None).unwrap();
        assert!(embed_2d(&one, 0).is_err());

        let f = blobs(20, 8, 0.3, 6.0, 3);
        assert_eq!(embed_2d(&f, 9).unwrap(), embed_2d(&f, 9).unwrap());
    }

    #[test]
    fn duplicates_stay_close() {
        let base = blobs(15, 8, 1.0, 3.0, 4);
        let doubled = ndarray::concatenate(Axis(0), &[base.vectors.view(), base.vectors.view()]).unwrap();
        let n = doubled.nrows();
        let f = FeatureSet::new(doubled, (0..n).map(|i| i.to_string()).collect(), None).unwrap();
        let e = embed_2d(&f, 1).unwrap();
        let diam = squared_distances(&e).iter().cloned().fold(0.0, f64::max).sqrt();
        for i in 0..n / 2 {
            let d = ((e[[i, 0]] - e[[i + n / 2, 0]]).powi(2) + (e[[i, 1]] - e[[i + n / 2, 1]]).powi(2)).sqrt();
            assert!(d < 0.1 * diam, "pair {i}: {d} vs diameter {diam}");
        }
    }

    #[test]
    fn separated_blobs_cluster_perfectly() {
        let f = blobs(50, 32, 0.1, 10.0, 5);
        let emb = embed_2d(&f, 6).unwrap();
        let a = two_means(&emb, 7).unwrap();
        let truth: Vec<u8> = (0..100).map(|i| u8::from(i >= 50)).collect();
        assert!(agreement(&a, &truth) >= 0.99);
        assert!(separation_margin(&emb, f.labels.as_ref().unwrap()) > 0.0);
        let r = clustered_accuracy(&f, 10, 1).unwrap();
        assert!(r.mean.unwrap() >= 0.99);
        assert_eq!(r.runs.len(), 10);
        assert!(r.std.unwrap() >= 0.0);
        assert_eq!(r.embedding_csv().lines().count(), 101);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut f = blobs(40, 8, 0.1, 10.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut labels: Vec<Label> = (0..80).map(|i| if i % 2 == 0 { Label::Real } else { Label::Fake }).collect();
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        f.labels = Some(labels);
        let r = clustered_accuracy(&f, 10, 3).unwrap();
        assert!((r.mean.unwrap() - 0.5).abs() <= 0.1, "{:?}", r.mean);
    }

    #[test]
    fn unlabeled_features_still_cluster() {
        let mut f = blobs(10, 4, 0.1, 10.0, 9);
        f.labels = None;
        let r = clustered_accuracy(&f, 1, 0).unwrap();
        assert_eq!(r.mean, None);
        assert_eq!(r.assigned.len(), 20);
    }

    #[test]
    fn pca_of_a_line() {
        let x = Array2::from_shape_fn((5, 3), |(i, j)| i as f64 * [1.0, 2.0, 2.0][j]);
        let e = pca_2d(&x);
        assert!(e.column(1).iter().all(|v| v.abs() < 1e-6));
        let spread = e[[4, 0]] - e[[0, 0]];
        assert!((spread.abs() - 12.0).abs() < 1e-6);
    }
}
