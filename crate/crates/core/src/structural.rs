//! Linear structural probes: squared distances regress onto tree distances,
//! squared norms onto depths.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Tensors};
use crate::stats::spearman;
use crate::transition::DependencyTree;
use crate::treebank::Sentence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuralKind {
    Distance,
    Depth,
}

impl std::str::FromStr for StructuralKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<StructuralKind> {
        match s {
            "distance" => Ok(StructuralKind::Distance),
            "depth" => Ok(StructuralKind::Depth),
            other => Err(Error::InvalidInput(format!("unknown probe kind `{other}`"))),
        }
    }
}

/// Projection `B` (rank × dim).
#[derive(Clone, Debug, PartialEq)]
pub struct Projection(pub Array2<f64>);

impl Tensors for Projection {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("proj", self.0.shape(), nn::slice(&self.0));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("proj", nn::slice_mut(&mut self.0));
    }
}

impl Projection {
    pub fn new(b: Array2<f64>) -> Result<Projection> {
        if b.nrows() > b.ncols() {
            return Err(Error::InvalidInput(format!(
                "rank {} exceeds dim {}",
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("projection has non-finite entries".into()));
        }
        Ok(Projection(b.as_standard_layout().into_owned()))
    }

    pub fn identity(dim: usize) -> Projection {
        Projection(Array2::eye(dim))
    }

    pub fn random(rank: usize, dim: usize, bound: f64, seed: u64) -> Result<Projection> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projection::new(nn::uniform_matrix(rank, dim, bound, &mut rng))
    }

    pub fn rank(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                expected: self.dim(),
                found: len,
            })
        }
    }

    /// `‖B(h_i − h_j)‖²`.
    pub fn distance(&self, hi: ArrayView1<f64>, hj: ArrayView1<f64>) -> Result<f64> {
        self.check(hi.len())?;
        self.check(hj.len())?;
        let diff = &hi - &hj;
        Ok(self.0.dot(&diff).mapv(|v| v * v).sum())
    }

    /// `‖Bh‖²`.
    pub fn depth(&self, h: ArrayView1<f64>) -> Result<f64> {
        self.check(h.len())?;
        Ok(self.0.dot(&h).mapv(|v| v * v).sum())
    }

    /// Rows of `h` mapped through `B`.
    pub fn transform(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(h.ncols())?;
        Ok(h.dot(&self.0.t()))
    }

    /// Squared distances between every pair of rows.
    pub fn pairwise(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(squared_distances(self.transform(h)?.view()))
    }

    pub fn depths(&self, h: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.transform(h)?.mapv(|v| v * v).sum_axis(Axis(1)))
    }
}

pub(crate) fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms = x.mapv(|v| v * v).sum_axis(Axis(1));
    let gram = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0)
        }
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `1/n² Σ_{i,j} |d_T(i,j) − ‖B(h_i−h_j)‖²|` and its gradient in `B`.
pub fn distance_loss(b: &Projection, h: ArrayView2<f64>, tree: &DependencyTree) -> Result<(f64, Array2<f64>)> {
    let n = h.nrows();
    let gold = tree.distance_matrix();
    let projected = b.transform(h)?;
    let pred = squared_distances(projected.view());
    let mut loss = 0.0;
    // Laplacian of the residual signs: Σ s_ij (x_i−x_j)(x_i−x_j)ᵀ = 2 Xᵀ L X.
    let mut laplacian = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let residual = pred[[i, j]] - gold[i][j] as f64;
            loss += residual.abs();
            let s = sign(residual);
            laplacian[[i, j]] -= s;
            laplacian[[i, i]] += s;
        }
    }
    let norm = (n * n) as f64;
    let grad = projected.t().dot(&laplacian).dot(&h) * (4.0 / norm);
    Ok((loss / norm, grad))
}

/// `1/n Σ_i |depth_i − ‖Bh_i‖²|` and its gradient in `B`.
pub fn depth_loss(b: &Projection, h: ArrayView2<f64>, tree: &DependencyTree) -> Result<(f64, Array2<f64>)> {
    let n = h.nrows();
    let depths = tree.depths();
    let projected = b.transform(h)?;
    let pred = projected.mapv(|v| v * v).sum_axis(Axis(1));
    let mut loss = 0.0;
    let mut signs = Array1::<f64>::zeros(n);
    for i in 0..n {
        let residual = pred[i] - depths[i] as f64;
        loss += residual.abs();
        signs[i] = sign(residual);
    }
    let weighted = &projected * &signs.insert_axis(Axis(1));
    let grad = weighted.t().dot(&h) * (2.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Which regression terms to optimise; both together give the joint loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub distance: bool,
    pub depth: bool,
}

impl Objectives {
    pub const JOINT: Objectives = Objectives {
        distance: true,
        depth: true,
    };

    pub fn single(kind: StructuralKind) -> Objectives {
        Objectives {
            distance: kind == StructuralKind::Distance,
            depth: kind == StructuralKind::Depth,
        }
    }
}

pub fn objective(b: &Projection, example: &Example, which: Objectives) -> Result<(f64, Array2<f64>)> {
    let h = example.emb.vectors();
    let tree = &example.sentence.tree;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(b.0.raw_dim());
    if which.distance {
        let (l, g) = distance_loss(b, h, tree)?;
        loss += l;
        grad += &g;
    }
    if which.depth {
        let (l, g) = depth_loss(b, h, tree)?;
        loss += l;
        grad += &g;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralConfig {
    /// Defaults to the embedding width.
    pub rank: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub init_bound: f64,
    pub seed: u64,
}

impl Default for StructuralConfig {
    fn default() -> StructuralConfig {
        StructuralConfig {
            rank: None,
            epochs: 40,
            lr: 1e-3,
            batch_size: 20,
            patience: 3,
            min_delta: 1e-4,
            init_bound: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

pub fn mean_objective(b: &Projection, examples: &[Example], which: Objectives) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for e in examples {
        total += objective(b, e, which)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Minimises the mean per-sentence L1 objective with Adam, keeping the
/// projection with the best dev loss. With zero epochs `init` is returned
/// unchanged.
pub fn fit_projection(
    init: Projection,
    train: &[Example],
    dev: &[Example],
    which: Objectives,
    config: &StructuralConfig,
) -> Result<(Projection, FitReport)> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dev = if dev.is_empty() { train } else { dev };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = init;
    let mut adam = Adam::new(config.lr);
    let mut best = b.clone();
    let mut best_dev = mean_objective(&b, dev, which)?;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_size = config.batch_size.max(1);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let mut grad = Projection(Array2::zeros(b.0.raw_dim()));
            for &k in batch {
                let (loss, g) = objective(&b, &train[k], which)?;
                train_total += loss;
                grad.0 += &g;
            }
            grad.0 /= batch.len() as f64;
            if !train_total.is_finite() || !nn::all_finite(&grad) {
                return Err(Error::Divergence { epoch, step });
            }
            adam.step(&mut b, &grad);
        }
        let train_loss = train_total / train.len() as f64;
        let dev_loss = mean_objective(&b, dev, which)?;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence { epoch, step: 0 });
        }
        epochs.push(EpochLoss {
            epoch,
            train_loss,
            dev_loss,
        });
        if dev_loss < best_dev - config.min_delta {
            best_dev = dev_loss;
            best = b.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((
        best,
        FitReport {
            epochs,
            best_epoch,
            best_dev_loss: best_dev,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralProbe {
    pub kind: StructuralKind,
    pub layer: usize,
    pub projection: Projection,
}

pub fn train_structural(
    train: &[Example],
    dev: &[Example],
    kind: StructuralKind,
    layer: usize,
    config: &StructuralConfig,
) -> Result<(StructuralProbe, FitReport)> {
    let dim = crate::data::embedding_dim(train)?;
    let rank = config.rank.unwrap_or(dim);
    let init = Projection::random(rank, dim, config.init_bound, config.seed)?;
    let (projection, report) = fit_projection(init, train, dev, Objectives::single(kind), config)?;
    Ok((
        StructuralProbe {
            kind,
            layer,
            projection,
        },
        report,
    ))
}

/// Minimum spanning tree over a symmetric distance matrix, as 1-based
/// `(i, j)` pairs with `i < j`. Ties go to the lexicographically smaller pair.
pub fn mst_decode(pairwise: ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
    let n = pairwise.nrows();
    if pairwise.ncols() != n {
        return Err(Error::InvalidInput("distance matrix is not square".into()));
    }
    let mut candidates = Vec::with_capacity(n * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (pairwise[[i, j]], pairwise[[j, i]]);
            if !a.is_finite() || (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::InvalidInput(format!(
                    "distance matrix is not symmetric at ({}, {})",
                    i + 1,
                    j + 1
                )));
            }
            candidates.push((a, i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for (_, i, j) in candidates {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            edges.push((i + 1, j + 1));
            if edges.len() + 1 == n {
                break;
            }
        }
    }
    Ok(edges)
}

/// Gold edges with a punctuation endpoint are left out of the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub correct: usize,
    pub total: usize,
}

impl EdgeCounts {
    pub fn add(&mut self, other: EdgeCounts) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn fraction(self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

pub fn uuas_counts(pred: &[(usize, usize)], sentence: &Sentence) -> EdgeCounts {
    let normalize = |(a, b): (usize, usize)| (a.min(b), a.max(b));
    let pred: std::collections::HashSet<_> = pred.iter().map(|&e| normalize(e)).collect();
    let mut counts = EdgeCounts::default();
    for (a, b) in sentence.tree.undirected_edges() {
        if sentence.is_punct(a) || sentence.is_punct(b) {
            continue;
        }
        counts.total += 1;
        if pred.contains(&normalize((a, b))) {
            counts.correct += 1;
        }
    }
    counts
}

pub fn uuas(pred: &[(usize, usize)], sentence: &Sentence) -> Option<f64> {
    uuas_counts(pred, sentence).fraction()
}

/// Spearman correlation over unordered word pairs.
pub fn sentence_dspr(pred: ArrayView2<f64>, tree: &DependencyTree) -> Option<f64> {
    let gold = tree.distance_matrix();
    let n = tree.n_words();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            x.push(pred[[i, j]]);
            y.push(gold[i][j] as f64);
        }
    }
    spearman(&x, &y)
}

pub const DSPR_MIN_LEN: usize = 5;
pub const DSPR_MAX_LEN: usize = 50;

/// Mean of per-sentence scores over sentences with 5 to 50 words.
pub fn mean_in_length_window(scores: &[(usize, Option<f64>)]) -> Option<f64> {
    let kept: Vec<f64> = scores
        .iter()
        .filter(|(n, _)| (DSPR_MIN_LEN..=DSPR_MAX_LEN).contains(n))
        .filter_map(|(_, s)| *s)
        .collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralEval {
    pub kind: StructuralKind,
    pub sentences: usize,
    /// Distance probes: UUAS over MST edges. Depth probes: fraction of
    /// sentences whose shallowest word is the gold root.
    pub uuas: Option<f64>,
    pub root_accuracy: Option<f64>,
    /// Distance probes: DSpr. Depth probes: Spearman with gold depth.
    pub spearman: Option<f64>,
}

pub fn evaluate_structural(probe: &StructuralProbe, examples: &[Example]) -> Result<StructuralEval> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts = EdgeCounts::default();
    let mut scores = Vec::new();
    let mut roots = 0;
    for e in examples {
        let h = e.emb.vectors();
        let n = e.sentence.n_words();
        match probe.kind {
            StructuralKind::Distance => {
                let pred = probe.projection.pairwise(h)?;
                counts.add(uuas_counts(&mst_decode(pred.view())?, &e.sentence));
                scores.push((n, sentence_dspr(pred.view(), &e.sentence.tree)));
            }
            StructuralKind::Depth => {
                let pred = probe.projection.depths(h)?;
                let gold: Vec<f64> = e.sentence.tree.depths().iter().map(|&d| d as f64).collect();
                scores.push((n, spearman(pred.as_slice().unwrap_or(&pred.to_vec()), &gold)));
                let shallowest = (0..n)
                    .filter(|&i| !e.sentence.is_punct(i + 1))
                    .min_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(a.cmp(&b)));
                if let Some(i) = shallowest {
                    roots += usize::from(e.sentence.tree.head(i + 1) == 0);
                }
            }
        }
    }
    Ok(StructuralEval {
        kind: probe.kind,
        sentences: examples.len(),
        uuas: counts.fraction(),
        root_accuracy: (probe.kind == StructuralKind::Depth)
            .then(|| roots as f64 / examples.len() as f64),
        spearman: mean_in_length_window(&scores),
    })
}

/// Classical multidimensional scaling of a distance matrix to two
/// coordinates. Each axis is signed so its first nonzero entry is positive.
pub fn pca_coords(pairwise: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = pairwise.nrows();
    if pairwise.ncols() != n {
        return Err(Error::InvalidInput("distance matrix is not square".into()));
    }
    let mut out = Array2::zeros((n, 2));
    if n < 2 {
        return Ok(out);
    }
    let sq = DMatrix::from_fn(n, n, |i, j| pairwise[[i, j]] * pairwise[[i, j]]);
    let centering = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let gram = (&centering * sq * &centering) * -0.5;
    let gram = (&gram + gram.transpose()) * 0.5;
    let eigen = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eigen.eigenvalues[k].max(0.0);
        let scale = lambda.sqrt();
        let column = eigen.eigenvectors.column(k);
        let flip = column
            .iter()
            .map(|v| v * scale)
            .find(|v| v.abs() > 1e-12)
            .map_or(1.0, |v| v.signum());
        for i in 0..n {
            out[[i, axis]] = column[i] * scale * flip;
        }
    }
    Ok(out)
}

pub const STRUCTURAL_FORMAT: &str = "incparse-structural/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralHeader {
    pub format: String,
    pub kind: StructuralKind,
    pub layer: usize,
    pub rank: usize,
    pub dim: usize,
    pub model_tag: String,
    pub seed: u64,
}

/// Header line, then the projection as row-major little-endian float32.
pub fn structural_bytes(probe: &StructuralProbe, model_tag: &str, seed: u64) -> Result<Vec<u8>> {
    let header = StructuralHeader {
        format: STRUCTURAL_FORMAT.to_string(),
        kind: probe.kind,
        layer: probe.layer,
        rank: probe.projection.rank(),
        dim: probe.projection.dim(),
        model_tag: model_tag.to_string(),
        seed,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(crate::embedding::f32_bytes(probe.projection.0.iter().copied()));
    Ok(out)
}

pub fn parse_structural(bytes: &[u8]) -> Result<(StructuralProbe, StructuralHeader)> {
    let bad = |m: String| Error::Checkpoint(m);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: StructuralHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != STRUCTURAL_FORMAT {
        return Err(bad(format!("unsupported format `{}`", header.format)));
    }
    let values = crate::embedding::read_f32s(&bytes[split + 1..])?;
    if values.len() != header.rank * header.dim {
        return Err(bad(format!(
            "expected {}x{} values, found {}",
            header.rank,
            header.dim,
            values.len()
        )));
    }
    let matrix = Array2::from_shape_vec((header.rank, header.dim), values).map_err(|e| bad(e.to_string()))?;
    let probe = StructuralProbe {
        kind: header.kind,
        layer: header.layer,
        projection: Projection::new(matrix)?,
    };
    Ok((probe, header))
}

pub fn save_structural(path: impl AsRef<Path>, probe: &StructuralProbe, model_tag: &str, seed: u64) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, structural_bytes(probe, model_tag, seed)?)?;
    Ok(())
}

pub fn load_structural(path: impl AsRef<Path>) -> Result<(StructuralProbe, StructuralHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_structural(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{planted_encoder, EmbeddingMatrix};
    use ndarray::array;

    fn sentence(heads: Vec<usize>, upos: &[&str]) -> Sentence {
        let tree = DependencyTree::from_heads(heads).unwrap();
        Sentence::new("s", upos.iter().map(|s| s.to_string()).collect(), tree).unwrap()
    }

    #[test]
    fn distance_and_depth_basics() {
        let b = Projection::identity(4);
        let hi = array![3.0, 4.0, 0.0, 1.0];
        let hj = array![0.0, 0.0, 0.0, 1.0];
        assert_eq!(b.distance(hi.view(), hj.view()).unwrap(), 25.0);
        assert_eq!(b.distance(hi.view(), hi.view()).unwrap(), 0.0);
        assert_eq!(Projection::identity(2).depth(array![3.0, 4.0].view()).unwrap(), 25.0);
        let b = Projection::random(3, 4, 1.0, 7).unwrap();
        let d = b.depth(hi.view()).unwrap();
        assert!((b.depth((&hi * 2.5).view()).unwrap() - 6.25 * d).abs() < 1e-9);
        assert!(b.distance(hi.view(), array![1.0].view()).is_err());
        assert!(Projection::new(Array2::zeros((3, 2))).is_err());
    }

    fn finite_difference(b: &Projection, f: impl Fn(&Projection) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(b.0.raw_dim());
        for idx in 0..b.0.len() {
            let (r, c) = (idx / b.dim(), idx % b.dim());
            let mut p = b.clone();
            p.0[[r, c]] += h;
            let up = f(&p);
            p.0[[r, c]] -= 2.0 * h;
            out[[r, c]] = (up - f(&p)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let tree = DependencyTree::from_heads(vec![2, 3, 0, 5, 3]).unwrap();
        for seed in 0..5 {
            let b = Projection::random(3, 6, 1.0, seed).unwrap();
            let h = nn::uniform_matrix(5, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(100 + seed));
            let (_, g) = distance_loss(&b, h.view(), &tree).unwrap();
            let fd = finite_difference(&b, |p| distance_loss(p, h.view(), &tree).unwrap().0);
            let err = (&g - &fd).mapv(f64::abs).sum() / fd.mapv(f64::abs).sum().max(1e-12);
            assert!(err < 1e-4, "distance gradient error {err}");
            let (_, g) = depth_loss(&b, h.view(), &tree).unwrap();
            let fd = finite_difference(&b, |p| depth_loss(p, h.view(), &tree).unwrap().0);
            let err = (&g - &fd).mapv(f64::abs).sum() / fd.mapv(f64::abs).sum().max(1e-12);
            assert!(err < 1e-4, "depth gradient error {err}");
        }
    }

    #[test]
    fn exact_fit_has_zero_step() {
        // star: the root at the origin, its dependents on orthogonal unit axes
        let tree = DependencyTree::from_heads(vec![0, 1, 1, 1]).unwrap();
        let h = array![
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0]
        ];
        let b = Projection::identity(4);
        let (loss, grad) = distance_loss(&b, h.view(), &tree).unwrap();
        assert!(loss < 1e-12);
        let mut stepped = b.clone();
        stepped.0 -= &(grad * 1e-3);
        let (after, _) = distance_loss(&stepped, h.view(), &tree).unwrap();
        assert!((after - loss).abs() < 1e-8);
    }

    #[test]
    fn mst_properties() {
        assert_eq!(mst_decode(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap(), vec![(1, 2)]);
        let tree = DependencyTree::from_heads(vec![2, 3, 0, 5, 3]).unwrap();
        let gold = tree.distance_matrix();
        let d = Array2::from_shape_fn((5, 5), |(i, j)| gold[i][j] as f64);
        let mut edges = mst_decode(d.view()).unwrap();
        edges.sort();
        let mut gold_edges = tree.undirected_edges();
        gold_edges.sort();
        assert_eq!(edges, gold_edges);
        let shifted = d.mapv(|v| if v == 0.0 { 0.0 } else { v + 7.5 });
        let mut again = mst_decode(shifted.view()).unwrap();
        again.sort();
        assert_eq!(again, edges);
        assert!(mst_decode(array![[0.0, 1.0], [2.0, 0.0]].view()).is_err());
        // all ties: a path through the lexicographically first pairs
        let flat = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(mst_decode(flat.view()).unwrap(), vec![(1, 2), (1, 3)]);
    }

    #[test]
    fn uuas_counts_exclude_punctuation() {
        let s = sentence(vec![2, 0, 2, 3, 2], &["DET", "NOUN", "VERB", "ADP", "PUNCT"]);
        let gold = s.tree.undirected_edges();
        assert_eq!(uuas(&gold, &s), Some(1.0));
        assert_eq!(uuas(&[(1, 3), (1, 4), (1, 5), (3, 5)], &s), Some(0.0));
        // gold non-punct edges: (1,2), (2,3), (3,4)
        let half = sentence(vec![2, 0, 2, 3, 4], &["X"; 5]);
        let pred = [(1, 2), (2, 3), (1, 4), (1, 5)];
        assert_eq!(uuas(&pred, &half), Some(0.5));
    }

    #[test]
    fn dspr_rank_behaviour() {
        let tree = DependencyTree::from_heads(vec![2, 3, 0, 5, 3]).unwrap();
        let gold = tree.distance_matrix();
        let d = Array2::from_shape_fn((5, 5), |(i, j)| gold[i][j] as f64);
        assert!((sentence_dspr(d.view(), &tree).unwrap() - 1.0).abs() < 1e-12);
        let affine = d.mapv(|v| 3.0 * v + 2.0);
        assert!((sentence_dspr(affine.view(), &tree).unwrap() - 1.0).abs() < 1e-12);
        let reversed = d.mapv(|v| -v);
        assert!((sentence_dspr(reversed.view(), &tree).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(mean_in_length_window(&[(4, Some(0.1)), (5, Some(0.5)), (51, Some(0.0))]), Some(0.5));
    }

    #[test]
    fn planted_identity_dspr() {
        let tree = DependencyTree::from_heads(vec![2, 3, 0, 5, 3, 5, 8, 3]).unwrap();
        let h = planted_encoder(&tree, 1024, 3).unwrap();
        let pred = Projection::identity(1024).pairwise(h.view()).unwrap();
        assert!(sentence_dspr(pred.view(), &tree).unwrap() >= 0.9);
    }

    #[test]
    fn pca_cases() {
        let line = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64).abs());
        let coords = pca_coords(line.view()).unwrap();
        assert!(coords.column(1).iter().all(|v| v.abs() < 1e-8));
        assert!(coords[[0, 0]] > 0.0);
        let tri = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let c = pca_coords(tri.view()).unwrap();
        let dist = |a: usize, b: usize| ((c[[a, 0]] - c[[b, 0]]).powi(2) + (c[[a, 1]] - c[[b, 1]]).powi(2)).sqrt();
        assert!((dist(0, 1) - dist(1, 2)).abs() < 1e-6 && (dist(0, 2) - dist(0, 1)).abs() < 1e-6);
        assert!((dist(0, 1) - 1.0).abs() < 1e-6);
        assert_eq!(pca_coords(array![[0.0]].view()).unwrap(), array![[0.0, 0.0]]);
    }

    #[test]
    fn zero_epochs_leaves_projection() {
        let tree = DependencyTree::from_heads(vec![2, 0, 2]).unwrap();
        let s = Sentence::new("a", vec!["X".into(); 3], tree.clone()).unwrap();
        let emb = EmbeddingMatrix::new("a", 0, "t", planted_encoder(&tree, 64, 1).unwrap()).unwrap();
        let examples = vec![Example { sentence: s, emb }];
        let init = Projection::random(8, 64, 0.05, 1).unwrap();
        let config = StructuralConfig {
            epochs: 0,
            ..StructuralConfig::default()
        };
        let (out, report) = fit_projection(init.clone(), &examples, &[], Objectives::JOINT, &config).unwrap();
        assert_eq!(out, init);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn structural_checkpoint_round_trip() {
        let probe = StructuralProbe {
            kind: StructuralKind::Depth,
            layer: 2,
            projection: Projection::random(3, 5, 0.5, 9).unwrap(),
        };
        let bytes = structural_bytes(&probe, "planted", 9).unwrap();
        let (loaded, header) = parse_structural(&bytes).unwrap();
        assert_eq!(header.rank, 3);
        assert_eq!(loaded.kind, StructuralKind::Depth);
        assert_eq!(structural_bytes(&loaded, "planted", 9).unwrap(), bytes);
        assert!(parse_structural(&bytes[..bytes.len() - 2]).is_err());
    }
}
