//! Contrastive objectives for fitting the random field.
//!
//! Both losses are returned as quantities to minimize, together with their
//! analytic gradients with respect to every feature map in the batch and the
//! coupling parameters.
//!
//! * Position loss: the true feature vector at a location competes against
//!   randomly drawn feature vectors from the batch under the product of the
//!   location's robust neighbor factors.
//! * Factor loss: every edge's robust factor on the true pair competes against
//!   the same factor evaluated on all pairs of an independently shuffled batch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::accumulate_feature_gradients;
use crate::error::{Error, Result};
use crate::mrf::{CouplingParams, NeighborhoodSpec, OffsetCache};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Position,
    Factor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSamplingConfig {
    pub mode: LossKind,
    /// Random negatives per target and repetition (position loss).
    pub negatives: usize,
    /// Independent negative draws whose gradients are summed (position loss).
    pub repetitions: usize,
}

impl NegativeSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 || self.repetitions == 0 {
            return Err(Error::InvalidArgument(
                "negative and repetition counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A location in a batch of feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// Spatial sizes of the maps in a batch, with a flat indexing of all positions.
#[derive(Clone, Debug)]
pub struct BatchGeometry {
    sizes: Vec<(usize, usize)>,
    starts: Vec<usize>,
    total: usize,
}

impl BatchGeometry {
    pub fn new(sizes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for &(h, w) in &sizes {
            starts.push(total);
            total += h * w;
        }
        BatchGeometry { sizes, starts, total }
    }

    fn of_maps(maps: &[Tensor]) -> Result<(Self, usize)> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (k, _, _) = first.dims3()?;
        let mut sizes = Vec::with_capacity(maps.len());
        for m in maps {
            let (km, h, w) = m.dims3()?;
            if km != k {
                return Err(Error::Shape(format!(
                    "batch mixes {k}- and {km}-channel feature maps"
                )));
            }
            sizes.push((h, w));
        }
        Ok((BatchGeometry::new(sizes), k))
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn images(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, image: usize) -> (usize, usize) {
        self.sizes[image]
    }

    pub fn flat(&self, p: Position) -> usize {
        self.starts[p.image] + p.row * self.sizes[p.image].1 + p.col
    }

    pub fn position(&self, flat: usize) -> Position {
        let image = self.starts.partition_point(|&s| s <= flat) - 1;
        let local = flat - self.starts[image];
        let w = self.sizes[image].1;
        Position {
            image,
            row: local / w,
            col: local % w,
        }
    }
}

/// Draws `count` distinct positions uniformly from the batch, never the target.
pub fn sample_negative_positions<R: Rng + ?Sized>(
    geometry: &BatchGeometry,
    target: Position,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Position>> {
    let pool = geometry.total().saturating_sub(1);
    if count > pool {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} negatives from {pool} other positions"
        )));
    }
    let skip = geometry.flat(target);
    Ok(rand::seq::index::sample(rng, pool, count)
        .into_iter()
        .map(|i| geometry.position(if i >= skip { i + 1 } else { i }))
        .collect())
}

/// One evaluation of a loss with its gradients.
#[derive(Clone, Debug)]
pub struct LossEval {
    /// Mean loss over targets (position) or summed per-offset mean (factor).
    pub loss: f64,
    /// Individual per-target or per-offset terms that make up `loss`.
    pub terms: Vec<f64>,
    pub feature_grads: Vec<Tensor>,
    pub param_grads: CouplingParams,
}

/// Loss value and gradients after accumulation over repetitions.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Objective whose gradient is reported: the sum over repetitions.
    pub value: f64,
    /// `value` per repetition and per term, comparable to `log(candidates)`.
    pub per_term: f64,
    pub feature_grads: Vec<Tensor>,
    pub param_grads: CouplingParams,
}

struct FeatureView<'a> {
    maps: &'a [Tensor],
    k: usize,
}

impl FeatureView<'_> {
    #[inline]
    fn gather(&self, p: Position, out: &mut [f64]) {
        let m = &self.maps[p.image];
        let (_, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let plane = h * w;
        let d = m.data();
        for l in 0..self.k {
            out[l] = d[l * plane + p.row * w + p.col];
        }
    }
}

#[inline]
fn scatter_add(grads: &mut [Tensor], p: Position, g: &[f64]) {
    let t = &mut grads[p.image];
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let d = t.data_mut();
    for (l, v) in g.iter().enumerate() {
        d[l * plane + p.row * w + p.col] += v;
    }
}

fn offset_caches(params: &CouplingParams, spec: &NeighborhoodSpec, k: usize) -> Result<Vec<OffsetCache>> {
    if params.offsets() != spec.len() || params.channels() != k {
        return Err(Error::Shape(format!(
            "coupling parameters [{} offsets x {} channels] do not fit a {}-offset neighborhood over {k} channels",
            params.offsets(),
            params.channels(),
            spec.len()
        )));
    }
    Ok((0..spec.len()).map(|o| OffsetCache::from_params(params, o)).collect())
}

fn log_sum_exp(values: &[f64]) -> (f64, f64) {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = values.iter().map(|v| (v - m).exp()).sum::<f64>();
    (m, s.ln())
}

/// One repetition of the position loss with fresh negatives.
///
/// Only positions whose whole neighborhood lies inside their map act as
/// targets; every position can serve as a neighbor or a negative. The loss is
/// the mean over targets of `log sum_q exp S_q - S_0`, where candidate 0 is the
/// true feature vector.
pub fn position_loss_single<R: Rng + ?Sized>(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    negatives: usize,
    rng: &mut R,
) -> Result<LossEval> {
    let (geometry, k) = BatchGeometry::of_maps(maps)?;
    let caches = offset_caches(params, spec, k)?;
    let (my, mx) = spec.margin();
    let mut targets = Vec::new();
    for image in 0..geometry.images() {
        let (h, w) = geometry.size(image);
        if h <= 2 * my || w <= 2 * mx {
            continue;
        }
        for row in my..h - my {
            for col in mx..w - mx {
                targets.push(Position { image, row, col });
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "no position has its full neighborhood inside the map".into(),
        ));
    }
    if negatives > geometry.total() - 1 {
        return Err(Error::InvalidArgument(format!(
            "batch has {} positions, too few to draw {negatives} negatives",
            geometry.total()
        )));
    }

    let view = FeatureView { maps, k };
    let mut feature_grads: Vec<Tensor> = maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
    let mut param_grads = params.zeros_like();
    let inv_t = 1.0 / targets.len() as f64;

    // neighbor list: (offset index, position) for both directions of every offset
    let mut neighbors: Vec<(usize, Position)> = Vec::with_capacity(spec.neighbor_count());
    let mut neighbor_feats = vec![0.0; spec.neighbor_count() * k];
    let mut cand_feats = vec![0.0; (negatives + 1) * k];
    let mut scores = vec![0.0; negatives + 1];
    let mut d_cand = vec![0.0; k];
    let mut d_nb = vec![0.0; k];
    let mut terms = Vec::with_capacity(targets.len());

    for &t in &targets {
        let mut candidates = Vec::with_capacity(negatives + 1);
        candidates.push(t);
        candidates.extend(sample_negative_positions(&geometry, t, negatives, rng)?);

        neighbors.clear();
        for (o, &(dy, dx)) in spec.offsets().iter().enumerate() {
            for sign in [1isize, -1] {
                neighbors.push((
                    o,
                    Position {
                        image: t.image,
                        row: (t.row as isize + sign * dy) as usize,
                        col: (t.col as isize + sign * dx) as usize,
                    },
                ));
            }
        }
        for (n, &(_, p)) in neighbors.iter().enumerate() {
            view.gather(p, &mut neighbor_feats[n * k..(n + 1) * k]);
        }
        for (q, &p) in candidates.iter().enumerate() {
            view.gather(p, &mut cand_feats[q * k..(q + 1) * k]);
        }

        for (q, score) in scores.iter_mut().enumerate() {
            let g = &cand_feats[q * k..(q + 1) * k];
            *score = neighbors
                .iter()
                .enumerate()
                .map(|(n, &(o, _))| caches[o].eval(g, &neighbor_feats[n * k..(n + 1) * k]).0)
                .sum();
        }
        let (m, lse) = log_sum_exp(&scores);
        terms.push((m - scores[0]) + lse);

        for (q, &p) in candidates.iter().enumerate() {
            let softmax = (scores[q] - m - lse).exp();
            let u = (softmax - if q == 0 { 1.0 } else { 0.0 }) * inv_t;
            if u == 0.0 {
                continue;
            }
            let g = &cand_feats[q * k..(q + 1) * k];
            d_cand.iter_mut().for_each(|v| *v = 0.0);
            for (n, &(o, np)) in neighbors.iter().enumerate() {
                let f = &neighbor_feats[n * k..(n + 1) * k];
                let (_, s) = caches[o].eval(g, f);
                d_nb.iter_mut().for_each(|v| *v = 0.0);
                let (lp, lc) = param_slices(&mut param_grads, o, k);
                caches[o].backprop(g, f, u, s, lp, lc, &mut d_cand, &mut d_nb);
                scatter_add(&mut feature_grads, np, &d_nb);
            }
            scatter_add(&mut feature_grads, p, &d_cand);
        }
    }

    let loss = terms.iter().sum::<f64>() * inv_t;
    Ok(LossEval {
        loss,
        terms,
        feature_grads,
        param_grads,
    })
}

fn param_slices(grads: &mut CouplingParams, offset: usize, k: usize) -> (&mut f64, &mut [f64]) {
    let lp = &mut grads.logit_p.data_mut()[offset];
    let lc = &mut grads.log_c.data_mut()[offset * k..(offset + 1) * k];
    (lp, lc)
}

/// Position loss summed over `cfg.repetitions` independent negative draws.
///
/// Feature gradients are accumulated at the feature-map level so that the
/// network needs a single backward pass for all repetitions.
pub fn position_loss<R: Rng + ?Sized>(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    cfg: &NegativeSamplingConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    cfg.validate()?;
    let mut param_grads = params.zeros_like();
    let acc = accumulate_feature_gradients(maps, cfg.repetitions, |_, f| {
        let e = position_loss_single(f, spec, params, cfg.negatives, rng)?;
        param_grads.add_assign(&e.param_grads)?;
        Ok((e.loss, e.feature_grads))
    })?;
    Ok(LossOutput {
        value: acc.loss,
        per_term: acc.loss / cfg.repetitions as f64,
        feature_grads: acc.grads,
        param_grads,
    })
}

/// Factor loss with one shuffled negative set per offset.
///
/// For each offset, all positions of the batch are permuted jointly and every
/// in-bounds pair of the permuted maps is a negative pair. The per-offset term
/// is `log sum_neg M - mean_pos log M`; the loss is the sum over offsets.
pub fn factor_loss<R: Rng + ?Sized>(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    rng: &mut R,
) -> Result<LossEval> {
    let (geometry, k) = BatchGeometry::of_maps(maps)?;
    let caches = offset_caches(params, spec, k)?;
    if geometry.total() < 2 {
        return Err(Error::InvalidArgument("factor loss needs at least 2 positions".into()));
    }
    let mut perm: Vec<usize> = (0..geometry.total()).collect();
    let mut shuffles = Vec::with_capacity(spec.len());
    for _ in 0..spec.len() {
        perm.shuffle(rng);
        shuffles.push(perm.clone());
    }
    factor_loss_with_permutations(maps, spec, params, &caches, &geometry, k, &shuffles)
}

/// Factor loss with caller-supplied permutations (one per offset, each over
/// all flat batch positions).
pub fn factor_loss_permuted(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    permutations: &[Vec<usize>],
) -> Result<LossEval> {
    let (geometry, k) = BatchGeometry::of_maps(maps)?;
    let caches = offset_caches(params, spec, k)?;
    if permutations.len() != spec.len() {
        return Err(Error::Shape("one permutation per offset required".into()));
    }
    for p in permutations {
        let mut seen = vec![false; geometry.total()];
        if p.len() != geometry.total() || p.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation of the batch positions".into()));
        }
    }
    factor_loss_with_permutations(maps, spec, params, &caches, &geometry, k, permutations)
}

fn factor_loss_with_permutations(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    caches: &[OffsetCache],
    geometry: &BatchGeometry,
    k: usize,
    permutations: &[Vec<usize>],
) -> Result<LossEval> {
    let view = FeatureView { maps, k };
    let mut feature_grads: Vec<Tensor> = maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
    let mut param_grads = params.zeros_like();
    let mut terms = Vec::with_capacity(spec.len());

    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let mut da = vec![0.0; k];
    let mut db = vec![0.0; k];

    for (o, &(dy, dx)) in spec.offsets().iter().enumerate() {
        let cache = &caches[o];
        let perm = &permutations[o];
        // in-bounds edges, as (first end, second end)
        let mut edges: Vec<(Position, Position)> = Vec::new();
        for image in 0..geometry.images() {
            let (h, w) = geometry.size(image);
            for row in 0..h {
                let tr = row as isize + dy;
                if tr < 0 || tr as usize >= h {
                    continue;
                }
                for col in 0..w {
                    let tc = col as isize + dx;
                    if tc < 0 || tc as usize >= w {
                        continue;
                    }
                    edges.push((
                        Position { image, row, col },
                        Position {
                            image,
                            row: tr as usize,
                            col: tc as usize,
                        },
                    ));
                }
            }
        }
        if edges.is_empty() {
            continue;
        }
        let shuffled = |p: Position| geometry.position(perm[geometry.flat(p)]);

        let mut pos_vals = Vec::with_capacity(edges.len());
        for &(i, j) in &edges {
            view.gather(i, &mut a);
            view.gather(j, &mut b);
            pos_vals.push(cache.eval(&a, &b));
        }
        let mut neg_vals = Vec::with_capacity(edges.len());
        for &(i, j) in &edges {
            view.gather(shuffled(i), &mut a);
            view.gather(shuffled(j), &mut b);
            neg_vals.push(cache.eval(&a, &b));
        }
        let neg_logm: Vec<f64> = neg_vals.iter().map(|v| v.0).collect();
        let (m, lse) = log_sum_exp(&neg_logm);
        let inv_pos = 1.0 / edges.len() as f64;
        let mean_gap = pos_vals.iter().map(|v| m - v.0).sum::<f64>() * inv_pos;
        terms.push(mean_gap + lse);

        let (lp, lc) = param_slices(&mut param_grads, o, k);
        for (&(i, j), &(_, s)) in edges.iter().zip(&pos_vals) {
            view.gather(i, &mut a);
            view.gather(j, &mut b);
            da.iter_mut().for_each(|v| *v = 0.0);
            db.iter_mut().for_each(|v| *v = 0.0);
            cache.backprop(&a, &b, -inv_pos, s, lp, lc, &mut da, &mut db);
            scatter_add(&mut feature_grads, i, &da);
            scatter_add(&mut feature_grads, j, &db);
        }
        for (&(i, j), &(v, s)) in edges.iter().zip(&neg_vals) {
            let u = (v - m - lse).exp();
            let (si, sj) = (shuffled(i), shuffled(j));
            view.gather(si, &mut a);
            view.gather(sj, &mut b);
            da.iter_mut().for_each(|v| *v = 0.0);
            db.iter_mut().for_each(|v| *v = 0.0);
            cache.backprop(&a, &b, u, s, lp, lc, &mut da, &mut db);
            scatter_add(&mut feature_grads, si, &da);
            scatter_add(&mut feature_grads, sj, &db);
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no in-bounds pair for any offset".into()));
    }
    Ok(LossEval {
        loss: terms.iter().sum(),
        terms,
        feature_grads,
        param_grads,
    })
}

/// Dispatches to the configured loss. Factor loss ignores the repetition count.
pub fn evaluate_loss<R: Rng + ?Sized>(
    maps: &[Tensor],
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    cfg: &NegativeSamplingConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    match cfg.mode {
        LossKind::Position => position_loss(maps, spec, params, cfg, rng),
        LossKind::Factor => {
            let e = factor_loss(maps, spec, params, rng)?;
            Ok(LossOutput {
                value: e.loss,
                per_term: e.loss / e.terms.len() as f64,
                feature_grads: e.feature_grads,
                param_grads: e.param_grads,
            })
        }
    }
}
