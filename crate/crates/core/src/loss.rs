//! Training losses: per-voxel weighted cross-entropy, distillation BCE,
//! scene-class affinity losses in geometric and semantic modes, and their
//! weighted total.
//!
//! All losses are built from tape primitives, so their gradients come from
//! the same backward rules the finite-difference suite verifies. Voxel class
//! layouts are `(V, C)` rows; [`logits_to_rows`] converts the networks'
//! channel-major volumes.

use thiserror::Error;

use crate::autodiff::{Scalar, Tape, TensorData, TensorId};
use crate::semkitti::IGNORE;

/// Clamp floor for affinity-loss log arguments.
const SCAL_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class frequency must be positive, got {0}")]
    BadFrequency(f64),
    #[error("all voxels carry the ignore label")]
    AllVoxelsIgnored,
    #[error("no class present in the ground truth")]
    NoClassPresent,
    #[error("negative loss weight {0}")]
    NegativeLambda(f64),
    #[error("class id {0} outside the weight table of {1} classes")]
    ClassOutOfRange(u16, usize),
}

/// Positive per-class weights, normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

/// Inverse-frequency class weights: `w_c = 1/freq_c`, then normalized so the
/// mean weight is 1.
pub fn class_weights(freqs: &[f64]) -> Result<ClassWeights, LossError> {
    if let Some(&bad) = freqs.iter().find(|&&f| !(f > 0.0)) {
        return Err(LossError::BadFrequency(bad));
    }
    let mut w: Vec<f64> = freqs.iter().map(|&f| 1.0 / f).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for v in &mut w {
        *v /= mean;
    }
    Ok(ClassWeights(w))
}

/// Reshape a channel-major `(C, ...)` logit volume into `(V, C)` rows.
pub fn logits_to_rows<T: Scalar>(tape: &mut Tape<T>, vol: TensorId) -> TensorId {
    let shape = tape.shape(vol).to_vec();
    let c = shape[0];
    let v: usize = shape[1..].iter().product();
    let flat = tape.reshape(vol, vec![c, v]);
    tape.transpose2d(flat)
}

/// Weighted cross-entropy over voxels: mean over counted voxels of
/// `-w_{y_k} * log softmax(logits_k)[y_k]`, ignoring label 255.
pub fn loss_ssc<T: Scalar>(
    tape: &mut Tape<T>,
    logits_rows: TensorId,
    gt: &[u16],
    weights: &ClassWeights,
) -> Result<TensorId, LossError> {
    let c = tape.shape(logits_rows)[1];
    assert_eq!(tape.shape(logits_rows)[0], gt.len(), "logit rows / label count mismatch");
    let counted: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE).collect();
    if counted.is_empty() {
        return Err(LossError::AllVoxelsIgnored);
    }
    let mut wv = Vec::with_capacity(counted.len());
    let mut cls = Vec::with_capacity(counted.len());
    for &i in &counted {
        let y = gt[i];
        if y as usize >= c {
            return Err(LossError::ClassOutOfRange(y, c));
        }
        if y as usize >= weights.0.len() {
            return Err(LossError::ClassOutOfRange(y, weights.0.len()));
        }
        wv.push(weights.0[y as usize]);
        cls.push(y as usize);
    }
    let rows = tape.index_rows(logits_rows, &counted);
    let lsm = tape.log_softmax(rows, 1);
    let picked = tape.gather_per_row(lsm, &cls);
    let w = tape.constant(TensorData::from_f64_slice(vec![counted.len()], &wv));
    let weighted = tape.mul(picked, w);
    let sum = tape.sum_all(weighted);
    let scaled = tape.mul_scalar(sum, T::from_f64(1.0 / counted.len() as f64));
    Ok(tape.neg(scaled))
}

/// Mean binary cross-entropy with logits, using the stable
/// `softplus(x) - x*t` form.
pub fn loss_bce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    targets: &TensorData<T>,
) -> TensorId {
    assert_eq!(tape.shape(logits), targets.shape(), "bce shape mismatch");
    assert!(
        targets.data().iter().all(|&t| t == T::zero() || t == T::one()),
        "bce targets must be binary"
    );
    let t = tape.constant(targets.clone());
    let sp = tape.softplus(logits);
    let xt = tape.mul(logits, t);
    let diff = tape.sub(sp, xt);
    tape.mean_all(diff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalMode {
    /// Collapse classes to occupied vs empty.
    Geo,
    /// One term per semantic class.
    Sem,
}

/// Scene-class affinity loss. For every class present in the ground truth,
/// penalize `-(log P + log R + log S)` where precision, recall, and
/// specificity are computed from soft probabilities; log arguments clamp to
/// `[1e-6, 1]`, and the specificity term is skipped when a class has no
/// negatives.
pub fn loss_scal<T: Scalar>(
    tape: &mut Tape<T>,
    logits_rows: TensorId,
    gt: &[u16],
    empty_id: u16,
    mode: ScalMode,
) -> Result<TensorId, LossError> {
    let c = tape.shape(logits_rows)[1];
    assert_eq!(tape.shape(logits_rows)[0], gt.len(), "logit rows / label count mismatch");
    let counted: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE).collect();
    if counted.is_empty() {
        return Err(LossError::AllVoxelsIgnored);
    }
    let labels: Vec<u16> = counted.iter().map(|&i| gt[i]).collect();
    let rows = tape.index_rows(logits_rows, &counted);
    let probs = tape.softmax(rows, 1);
    let k = counted.len();

    // Soft probability of one class across all counted voxels.
    let column = |tape: &mut Tape<T>, cls: usize| -> TensorId {
        let mut e = vec![0.0f64; c];
        e[cls] = 1.0;
        let ec = tape.constant(TensorData::from_f64_slice(vec![c, 1], &e));
        let col = tape.matmul(probs, ec);
        tape.reshape(col, vec![k])
    };

    let mut cases: Vec<(TensorId, Vec<bool>)> = Vec::new();
    match mode {
        ScalMode::Geo => {
            let occ_member: Vec<bool> = labels.iter().map(|&l| l != empty_id).collect();
            if occ_member.iter().any(|&m| m) {
                let p_empty = column(tape, empty_id as usize);
                let neg = tape.neg(p_empty);
                let p_occ = tape.add_scalar(neg, T::one());
                cases.push((p_occ, occ_member.clone()));
            }
            if occ_member.iter().any(|&m| !m) {
                let p_e = column(tape, empty_id as usize);
                cases.push((p_e, occ_member.iter().map(|&m| !m).collect()));
            }
        }
        ScalMode::Sem => {
            for cls in 0..c {
                if cls == empty_id as usize {
                    continue;
                }
                let member: Vec<bool> = labels.iter().map(|&l| l as usize == cls).collect();
                if member.iter().any(|&m| m) {
                    cases.push((column(tape, cls), member));
                }
            }
        }
    }
    if cases.is_empty() {
        return Err(LossError::NoClassPresent);
    }

    let eps = T::from_f64(SCAL_EPS);
    let mut terms: Vec<TensorId> = Vec::new();
    let n_present = cases.len();
    for (p, member) in cases {
        let m: Vec<f64> = member.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let count_pos = member.iter().filter(|&&b| b).count();
        let count_neg = k - count_pos;
        let mask = tape.constant(TensorData::from_f64_slice(vec![k], &m));
        let pm = tape.mul(p, mask);
        let num = tape.sum_all(pm);
        // Precision: sum(p * m) / sum(p); the denominator is guarded against
        // complete underflow of the class probability.
        let den_raw = tape.sum_all(p);
        let den = tape.add_scalar(den_raw, T::from_f64(1e-30));
        let prec = tape.div(num, den);
        let prec_c = tape.clamp(prec, eps, T::one());
        terms.push(tape.log(prec_c));
        // Recall: sum(p * m) / |members|.
        let rec = tape.mul_scalar(num, T::from_f64(1.0 / count_pos as f64));
        let rec_c = tape.clamp(rec, eps, T::one());
        terms.push(tape.log(rec_c));
        // Specificity: sum((1-p) * (1-m)) / |non-members|, skipped when the
        // class covers every voxel.
        if count_neg > 0 {
            let inv_m: Vec<f64> = m.iter().map(|&v| 1.0 - v).collect();
            let inv_mask = tape.constant(TensorData::from_f64_slice(vec![k], &inv_m));
            let negp = tape.neg(p);
            let one_minus_p = tape.add_scalar(negp, T::one());
            let prod = tape.mul(one_minus_p, inv_mask);
            let snum = tape.sum_all(prod);
            let spec = tape.mul_scalar(snum, T::from_f64(1.0 / count_neg as f64));
            let spec_c = tape.clamp(spec, eps, T::one());
            terms.push(tape.log(spec_c));
        }
    }
    let total = tape.add_n(&terms);
    let neg = tape.neg(total);
    Ok(tape.mul_scalar(neg, T::from_f64(1.0 / n_present as f64)))
}

/// Named scalar losses with their weights and composed total.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub l_bce: f64,
    pub l_scal_geo: f64,
    pub l_scal_sem: f64,
    pub l_ssc: f64,
    pub lambdas: [f64; 4],
    pub total: f64,
}

/// Weighted total `λ1·bce + λ2·scal_geo + λ3·scal_sem + λ4·ssc`; returns the
/// differentiable total plus a bundle of component values for logging.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_bce: TensorId,
    l_scal_geo: TensorId,
    l_scal_sem: TensorId,
    l_ssc: TensorId,
    lambdas: [f64; 4],
) -> Result<(TensorId, LossBundle), LossError> {
    if let Some(&bad) = lambdas.iter().find(|&&l| l < 0.0) {
        return Err(LossError::NegativeLambda(bad));
    }
    let parts = [l_bce, l_scal_geo, l_scal_sem, l_ssc];
    let weighted: Vec<TensorId> = parts
        .iter()
        .zip(lambdas)
        .map(|(&p, l)| tape.mul_scalar(p, T::from_f64(l)))
        .collect();
    let total = tape.add_n(&weighted);
    let bundle = LossBundle {
        l_bce: tape.value(l_bce).data()[0].as_f64(),
        l_scal_geo: tape.value(l_scal_geo).data()[0].as_f64(),
        l_scal_sem: tape.value(l_scal_sem).data()[0].as_f64(),
        l_ssc: tape.value(l_ssc).data()[0].as_f64(),
        lambdas,
        total: tape.value(total).data()[0].as_f64(),
    };
    Ok((total, bundle))
}
