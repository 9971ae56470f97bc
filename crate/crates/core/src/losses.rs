//! Training objectives.
//!
//! * multi-label soft-margin classification loss
//! * prototype-based temporal equivariance regulation (PTER): cross-frame
//!   patch similarity, window-masked propagation of Sinkhorn cluster
//!   assignments from the reference frame, cross-entropy against the target
//!   frame's prototype probabilities
//! * class-aware temporal semantic continuity (CTSC): multi-label InfoNCE
//!   between local reference-crop class tokens and global target class tokens
//! * momentum update of the global projection head
//!
//! Graph-level functions take and return [`Var`]s so they can be
//! differentiated; the `*_value` helpers evaluate on plain matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-12;
pub const NORM_EPS: f64 = 1e-8;
/// Stand-in for `-inf` where masked entries are later multiplied by zero.
const MASKED_LOGIT: f64 = -1e30;

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// `-(1/C) Σ [y log σ(x) + (1-y) log(1-σ(x))]` for 1×C logits.
pub fn mlsm_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let c = labels.len();
    assert_eq!(g.shape(logits), (1, c), "mlsm_loss: logits must be 1×C");
    let y = Array2::from_shape_fn((1, c), |(_, j)| labels[j] as f64);
    let not_y = y.mapv(|v| 1.0 - v);
    let pos = g.log_sigmoid(logits);
    let neg_logits = g.scale(logits, -1.0);
    let neg = g.log_sigmoid(neg_logits);
    let yv = g.constant(y);
    let nyv = g.constant(not_y);
    let a = g.mul(pos, yv);
    let b = g.mul(neg, nyv);
    let s = g.add(a, b);
    let total = g.sum(s);
    g.scale(total, -1.0 / c as f64)
}

pub fn mlsm_loss_value(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Config("logits and labels differ in length".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Config("labels must be binary".into()));
    }
    check_finite("mlsm_loss logits", logits.iter().copied())?;
    let mut g = Graph::inference();
    let x = g.constant(Array2::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row"));
    let l = mlsm_loss(&mut g, x, labels);
    Ok(g.scalar(l))
}

/// Cross-frame patch similarity `F[i][j] = cos(z_ref_i, z_tgt_j) / τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Mat,
    pub temperature: f64,
}

pub fn spatial_similarity(g: &mut Graph, z_ref: Var, z_tgt: Var, temperature: f64) -> Var {
    assert_eq!(g.shape(z_ref).1, g.shape(z_tgt).1, "token dims differ");
    let a = g.l2_normalize_rows(z_ref, NORM_EPS);
    let b = g.l2_normalize_rows(z_tgt, NORM_EPS);
    let cos = g.matmul_nt(a, b);
    g.scale(cos, 1.0 / temperature)
}

pub fn spatial_similarity_value(z_ref: &Mat, z_tgt: &Mat, temperature: f64) -> Result<SimilarityMatrix> {
    if z_ref.nrows() != z_tgt.nrows() || z_ref.ncols() != z_tgt.ncols() {
        return Err(Error::Config("token grids differ in shape".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("similarity temperature must be positive".into()));
    }
    let mut g = Graph::inference();
    let a = g.constant(z_ref.clone());
    let b = g.constant(z_tgt.clone());
    let f = spatial_similarity(&mut g, a, b, temperature);
    Ok(SimilarityMatrix {
        values: g.value(f).clone(),
        temperature,
    })
}

/// Additive mask over an N×N similarity: 0 where reference patch `i` lies in
/// the k×k window centred on target patch `j`, `-inf` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodMask {
    pub grid: usize,
    pub window: usize,
    pub additive: Mat,
}

impl NeighborhoodMask {
    pub fn new(grid: usize, window: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Config("empty patch grid".into()));
        }
        if window % 2 == 0 {
            return Err(Error::Config(format!("window size must be odd, got {window}")));
        }
        if window > grid {
            log::warn!("window {window} exceeds grid side {grid}; keeping all entries");
        }
        let n = grid * grid;
        let r = (window / 2) as isize;
        let additive = Array2::from_shape_fn((n, n), |(i, j)| {
            let (ri, ci) = ((i / grid) as isize, (i % grid) as isize);
            let (rj, cj) = ((j / grid) as isize, (j % grid) as isize);
            if (ri - rj).abs() <= r && (ci - cj).abs() <= r {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        Ok(NeighborhoodMask {
            grid,
            window,
            additive,
        })
    }

    /// Grid side of an N-patch square grid.
    pub fn for_patches(num_patches: usize, window: usize) -> Result<Self> {
        let side = (num_patches as f64).sqrt().round() as usize;
        if side * side != num_patches {
            return Err(Error::Config(format!("{num_patches} patches do not form a square grid")));
        }
        Self::new(side, window)
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.additive[[i, j]] == 0.0
    }

    pub fn apply(&self, g: &mut Graph, f: Var) -> Var {
        g.add_const(f, &self.additive)
    }

    pub fn apply_value(&self, f: &SimilarityMatrix) -> Mat {
        &f.values + &self.additive
    }
}

/// `out[j] = Σ_i softmax_i(F[·][j]) · values[i]`: each target patch takes a
/// convex combination of reference rows inside its window.
pub fn propagate(g: &mut Graph, f_masked: Var, values: Var) -> Var {
    let ft = g.transpose(f_masked);
    let w = g.softmax_rows(ft);
    g.matmul(w, values)
}

pub fn propagate_value(f_masked: &Mat, values: &Mat) -> Mat {
    let mut g = Graph::inference();
    let f = g.constant(f_masked.clone());
    let v = g.constant(values.clone());
    let out = propagate(&mut g, f, v);
    g.value(out).clone()
}

/// Balanced soft assignment of N rows to K clusters by Sinkhorn–Knopp
/// scaling of `exp(scores / ε)`.
///
/// Each round rescales columns to mass N/K and then rows to mass 1, so the
/// result is always row-stochastic.
pub fn sinkhorn_assign(scores: &Mat, epsilon: f64, iters: usize) -> Result<Mat> {
    if !(epsilon > 0.0) {
        return Err(Error::Config("sinkhorn epsilon must be positive".into()));
    }
    check_finite("sinkhorn scores", scores.iter().copied())?;
    let (n, k) = scores.dim();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q = scores.mapv(|s| ((s - max) / epsilon).exp());
    let col_target = n as f64 / k as f64;
    for _ in 0..iters {
        for mut col in q.columns_mut() {
            let z = col.sum();
            if z > 0.0 {
                col *= col_target / z;
            }
        }
        normalize_rows(&mut q);
    }
    normalize_rows(&mut q);
    check_finite("sinkhorn output", q.iter().copied())?;
    Ok(q)
}

/// [`sinkhorn_assign`] restricted to the columns flagged in `allowed`; the
/// other columns of the result are zero.
pub fn sinkhorn_assign_masked(scores: &Mat, allowed: &[bool], epsilon: f64, iters: usize) -> Result<Mat> {
    if allowed.len() != scores.ncols() {
        return Err(Error::Config("column mask length differs from score columns".into()));
    }
    let cols: Vec<usize> = (0..allowed.len()).filter(|&c| allowed[c]).collect();
    if cols.is_empty() {
        return Err(Error::Config("no cluster is allowed".into()));
    }
    let sub = scores.select(ndarray::Axis(1), &cols);
    let q = sinkhorn_assign(&sub, epsilon, iters)?;
    let mut out = Array2::zeros(scores.dim());
    for (k, &c) in cols.iter().enumerate() {
        out.column_mut(c).assign(&q.column(k));
    }
    Ok(out)
}

fn normalize_rows(q: &mut Mat) {
    let k = q.ncols() as f64;
    for mut row in q.rows_mut() {
        let z = row.sum();
        if z > 0.0 {
            row /= z;
        } else {
            row.fill(1.0 / k);
        }
    }
}

/// Total-variation distance of the column masses from the uniform N/K.
pub fn column_marginal_tv(q: &Mat) -> f64 {
    let (n, k) = q.dim();
    let target = n as f64 / k as f64;
    0.5 * q.columns().into_iter().map(|c| (c.sum() - target).abs()).sum::<f64>() / n as f64
}

/// `-(1/N) Σ_j Σ_c FP(Ỹ_ref)[j,c] · log q_tgt[j,c]`.
///
/// `assign_ref` is a constant: nothing flows back into the reference
/// assignments or the Sinkhorn step that produced them.
pub fn pter_loss(g: &mut Graph, assign_ref: &Mat, f_masked: Var, q_tgt: Var) -> Var {
    let n = g.shape(q_tgt).0;
    let y = g.constant(assign_ref.clone());
    let target = propagate(g, f_masked, y);
    let logq = g.log_clamp(q_tgt, LOG_FLOOR);
    let prod = g.mul(target, logq);
    let total = g.sum(prod);
    g.scale(total, -1.0 / n as f64)
}

pub fn pter_loss_value(assign_ref: &Mat, f_masked: &Mat, q_tgt: &Mat) -> Result<f64> {
    let mut g = Graph::inference();
    let f = g.constant(f_masked.clone());
    let q = g.constant(q_tgt.clone());
    let l = pter_loss(&mut g, assign_ref, f, q);
    let v = g.scalar(l);
    check_finite("pter loss", [v])?;
    Ok(v)
}

/// Metadata of one row of a contrastive batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub class_of: usize,
    pub image_of: usize,
    pub valid: bool,
}

/// Positive (`I`) and denominator (`Ī`) membership, B_local × B_global.
///
/// Positives share class and image; the denominator holds the positives plus
/// every valid cross-class pair. Same-class rows from other images are in
/// neither.
pub fn build_contrast_masks(local: &[RowMeta], global: &[RowMeta]) -> (Mat, Mat) {
    let pos = Array2::from_shape_fn((local.len(), global.len()), |(i, j)| {
        let (a, b) = (local[i], global[j]);
        (a.valid && b.valid && a.class_of == b.class_of && a.image_of == b.image_of) as u8 as f64
    });
    let denom = Array2::from_shape_fn((local.len(), global.len()), |(i, j)| {
        let (a, b) = (local[i], global[j]);
        let neg = a.valid && b.valid && a.class_of != b.class_of;
        (pos[[i, j]] > 0.0 || neg) as u8 as f64
    });
    (pos, denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastBatch {
    /// B·C·L × d, rows L2-normalised.
    pub x_local: Mat,
    /// B·C × d, rows L2-normalised.
    pub x_global: Mat,
    pub local_meta: Vec<RowMeta>,
    pub global_meta: Vec<RowMeta>,
    pub temperature: f64,
}

impl ContrastBatch {
    pub fn masks(&self) -> (Mat, Mat) {
        build_contrast_masks(&self.local_meta, &self.global_meta)
    }
}

/// Multi-label InfoNCE averaged over positive pairs. Returns the loss node
/// and the number of positives; with no positives the loss is exactly 0.
pub fn ctsc_loss(g: &mut Graph, x_local: Var, x_global: Var, pos: &Mat, denom: &Mat, temperature: f64) -> (Var, usize) {
    let count = pos.iter().filter(|&&v| v > 0.0).count();
    if count == 0 {
        return (g.scalar_const(0.0), 0);
    }
    let sim = g.matmul_nt(x_local, x_global);
    let sim = g.scale(sim, 1.0 / temperature);
    let additive = Array2::from_shape_fn(denom.dim(), |(i, j)| {
        let row_empty = denom.row(i).iter().all(|&v| v == 0.0);
        if denom[[i, j]] > 0.0 || row_empty {
            0.0
        } else {
            MASKED_LOGIT
        }
    });
    let masked = g.add_const(sim, &additive);
    let log_ratio = g.log_softmax_rows(masked);
    let w = g.constant(pos.clone());
    let picked = g.mul(log_ratio, w);
    let total = g.sum(picked);
    (g.scale(total, -1.0 / count as f64), count)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtscValue {
    pub loss: f64,
    pub num_positives: usize,
}

pub fn ctsc_loss_value(batch: &ContrastBatch) -> Result<CtscValue> {
    if batch.x_local.nrows() != batch.local_meta.len() || batch.x_global.nrows() != batch.global_meta.len() {
        return Err(Error::Config("contrast batch metadata length mismatch".into()));
    }
    let (pos, denom) = batch.masks();
    let mut g = Graph::inference();
    let xl = g.constant(batch.x_local.clone());
    let xg = g.constant(batch.x_global.clone());
    let (l, count) = ctsc_loss(&mut g, xl, xg, &pos, &denom, batch.temperature);
    let loss = g.scalar(l);
    check_finite("ctsc loss", [loss])?;
    Ok(CtscValue {
        loss,
        num_positives: count,
    })
}

/// Momentum copy of a parameter collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub params: Vec<Mat>,
    pub rho: f64,
}

impl EmaState {
    pub fn new(params: Vec<Mat>, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("momentum {rho} outside [0, 1]")));
        }
        Ok(EmaState { params, rho })
    }

    /// `θ_g ← ρ θ_g + (1 − ρ) θ_l`
    pub fn update(&mut self, local: &[&Mat]) -> Result<()> {
        ema_update(&mut self.params.iter_mut().collect::<Vec<_>>(), local, self.rho)
    }
}

pub fn ema_update(global: &mut [&mut Mat], local: &[&Mat], rho: f64) -> Result<()> {
    if global.len() != local.len() || global.iter().zip(local).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Config("EMA parameter shapes differ".into()));
    }
    for (tg, tl) in global.iter_mut().zip(local) {
        ndarray::Zip::from(&mut **tg)
            .and(*tl)
            .for_each(|a, &b| *a = rho * *a + (1.0 - rho) * b);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub pter: f64,
    pub ctsc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            pter: 1.0,
            ctsc: 1.0,
        }
    }
}

/// Weighted sum of the three components; a non-finite component is an error naming it.
pub fn overall_loss(cls: f64, pter: f64, ctsc: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("cls", cls), ("pter", pter), ("ctsc", ctsc)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(w.cls * cls + w.pter * pter + w.ctsc * ctsc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mlsm_closed_forms() {
        assert!((mlsm_loss_value(&[0.0; 7], &[1, 0, 1, 1, 0, 0, 1]).unwrap() - LN_2).abs() < 1e-12);
        let y = [1u8, 0, 0, 1];
        let x: Vec<f64> = y.iter().map(|&v| if v == 1 { 40.0 } else { -40.0 }).collect();
        assert!(mlsm_loss_value(&x, &y).unwrap() < 1e-15);
        let big = mlsm_loss_value(&[100.0, -100.0], &[0, 1]).unwrap();
        assert!((big - 100.0).abs() < 1e-9);
        assert!(mlsm_loss_value(&[f64::NAN], &[1]).is_err());
    }

    #[test]
    fn mlsm_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<u8> = (0..7).map(|_| rng.gen_range(0..2)).collect();
            let brute = -x
                .iter()
                .zip(&y)
                .map(|(&xi, &yi)| {
                    let s = 1.0 / (1.0 + (-xi).exp());
                    yi as f64 * s.ln() + (1.0 - yi as f64) * (1.0 - s).ln()
                })
                .sum::<f64>()
                / 7.0;
            assert!((mlsm_loss_value(&x, &y).unwrap() - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_examples() {
        let z = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let f = spatial_similarity_value(&z, &z, 0.07).unwrap();
        for i in 0..3 {
            assert!((f.values[[i, i]] - 1.0 / 0.07).abs() < 1e-9);
            for j in 0..3 {
                if i != j {
                    assert_eq!(f.values[[i, j]], 0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_mat(&mut rng, 9, 4), rand_mat(&mut rng, 9, 4));
        let fab = spatial_similarity_value(&a, &b, 0.1).unwrap().values;
        let fba = spatial_similarity_value(&b, &a, 0.1).unwrap().values;
        assert_eq!(fab, fba.t());
        // zero token is guarded
        let zero = Array2::zeros((9, 4));
        assert!(spatial_similarity_value(&zero, &b, 0.1).unwrap().values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn window_membership() {
        let k1 = NeighborhoodMask::new(4, 1).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(k1.keeps(i, j), i == j);
            }
        }
        let full = NeighborhoodMask::new(4, 9).unwrap();
        assert!(full.additive.iter().all(|&v| v == 0.0));
        let k3 = NeighborhoodMask::new(4, 3).unwrap();
        assert_eq!((0..16).filter(|&i| k3.keeps(i, 0)).count(), 4);
        assert_eq!((0..16).filter(|&i| k3.keeps(i, 5)).count(), 9);
        assert!(NeighborhoodMask::new(4, 2).is_err());
        assert!(NeighborhoodMask::for_patches(15, 3).is_err());
    }

    #[test]
    fn propagation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_mat(&mut rng, 16, 16);
        let vals = rand_mat(&mut rng, 16, 3);
        let id = propagate_value(&NeighborhoodMask::new(4, 1).unwrap().apply_value(&SimilarityMatrix { values: f.clone(), temperature: 1.0 }), &vals);
        assert!((id - &vals).iter().all(|d| d.abs() < 1e-12));

        // uniform similarity → window mean
        let mask = NeighborhoodMask::new(4, 3).unwrap();
        let fm = &Array2::<f64>::zeros((16, 16)) + &mask.additive;
        let out = propagate_value(&fm, &vals);
        let members: Vec<usize> = (0..16).filter(|&i| mask.keeps(i, 0)).collect();
        for c in 0..3 {
            let mean = members.iter().map(|&i| vals[[i, c]]).sum::<f64>() / members.len() as f64;
            assert!((out[[0, c]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_examples() {
        let q = sinkhorn_assign(&Array2::zeros((4, 2)), 0.05, 3).unwrap();
        assert!(q.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let scores = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 10.0 } else { -10.0 });
        let q = sinkhorn_assign(&scores, 0.05, 100).unwrap();
        let eye = Array2::<f64>::eye(3);
        assert!((q - eye).iter().all(|d| d.abs() < 1e-3));
        assert!(sinkhorn_assign(&scores, 0.0, 3).is_err());
        // huge scores do not overflow
        let q = sinkhorn_assign(&(scores * 1e3), 0.05, 3).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pter_examples() {
        let n = 4;
        let k = 8;
        let mask = NeighborhoodMask::new(2, 1).unwrap();
        let f = &Array2::<f64>::zeros((n, n)) + &mask.additive;
        let uniform = Array2::from_elem((n, k), 1.0 / k as f64);
        let l = pter_loss_value(&uniform, &f, &uniform).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
        let mut onehot = Array2::zeros((n, k));
        onehot.column_mut(2).fill(1.0);
        assert!(pter_loss_value(&onehot, &f, &onehot).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrast_masks_examples() {
        let meta = |class_of, image_of, valid| RowMeta {
            class_of,
            image_of,
            valid,
        };
        let (pos, _) = build_contrast_masks(&[meta(0, 0, true)], &[meta(0, 0, true)]);
        assert_eq!(pos.sum(), 1.0);
        let (pos, _) = build_contrast_masks(&[meta(0, 0, false)], &[meta(0, 0, true), meta(1, 0, true)]);
        assert_eq!(pos.sum(), 0.0);

        let mut local = Vec::new();
        let mut global = Vec::new();
        for b in 0..2 {
            for c in 0..2 {
                local.push(meta(c, b, true));
                global.push(meta(c, b, true));
            }
        }
        let (pos, denom) = build_contrast_masks(&local, &global);
        assert_eq!(pos.sum(), 4.0);
        for row in denom.rows() {
            assert_eq!(row.sum(), 3.0);
        }
        assert!(pos.iter().zip(denom.iter()).all(|(&p, &d)| p <= d));
    }

    #[test]
    fn ctsc_closed_forms() {
        let meta = |class_of, valid| RowMeta {
            class_of,
            image_of: 0,
            valid,
        };
        let one = ContrastBatch {
            x_local: array![[1.0, 0.0]],
            x_global: array![[0.6, 0.8]],
            local_meta: vec![meta(0, true)],
            global_meta: vec![meta(0, true)],
            temperature: 0.1,
        };
        assert!(ctsc_loss_value(&one).unwrap().loss.abs() < 1e-12);

        let two = ContrastBatch {
            x_local: array![[1.0, 0.0]],
            x_global: array![[0.6, 0.8], [0.6, -0.8]],
            local_meta: vec![meta(0, true)],
            global_meta: vec![meta(0, true), meta(1, true)],
            temperature: 0.1,
        };
        assert!((ctsc_loss_value(&two).unwrap().loss - LN_2).abs() < 1e-12);

        let none = ContrastBatch {
            local_meta: vec![meta(0, false)],
            ..two
        };
        let v = ctsc_loss_value(&none).unwrap();
        assert_eq!((v.loss, v.num_positives), (0.0, 0));
    }

    #[test]
    fn ema_examples() {
        let run = |rho: f64| {
            let mut st = EmaState::new(vec![array![[2.0]]], rho).unwrap();
            st.update(&[&array![[4.0]]]).unwrap();
            st.params[0][[0, 0]]
        };
        assert_eq!(run(1.0), 2.0);
        assert_eq!(run(0.0), 4.0);
        assert_eq!(run(0.5), 3.0);
        let mut st = EmaState::new(vec![array![[2.0, 1.0]]], 0.5).unwrap();
        assert!(st.update(&[&array![[4.0]]]).is_err());
        assert!(EmaState::new(vec![], 1.5).is_err());
    }

    #[test]
    fn overall_examples() {
        let w = LossWeights {
            cls: 1.0,
            pter: 0.0,
            ctsc: 0.0,
        };
        assert_eq!(overall_loss(0.7, 3.0, 9.0, &w).unwrap(), 0.7);
        assert_eq!(overall_loss(0.0, 0.0, 0.0, &LossWeights::default()).unwrap(), 0.0);
        let w = LossWeights {
            cls: 0.5,
            pter: 1.2,
            ctsc: 0.3,
        };
        assert!((overall_loss(2.0, 1.0, 4.0, &w).unwrap() - 3.4).abs() < 1e-12);
        match overall_loss(1.0, f64::NAN, 0.0, &w) {
            Err(Error::Numeric(m)) => assert!(m.contains("pter")),
            other => panic!("{other:?}"),
        }
    }
}
