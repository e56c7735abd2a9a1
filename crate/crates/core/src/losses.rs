//! Training objectives. Each loss exists in a differentiable form on [`Var`]s
//! and as a plain value function for evaluation.
//!
//! Reductions: L1 and squared-L2 terms are means over elements, adversarial
//! log terms are means over discriminator patches.

use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::autograd::{stack, Tape, Var};
use crate::datamodel::{AppearanceFilter, Betas, ContentFeature, Embedding, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Discriminator- and generator-side values of one adversarial loss, with
/// the number of probabilities that needed clamping.
#[derive(Clone, Copy, Debug)]
pub struct AdvLoss<T> {
    pub loss_d: T,
    pub loss_g: T,
    pub clamped: usize,
}

fn clamped_count(v: &Var<'_>) -> usize {
    v.value()
        .data()
        .iter()
        .filter(|&&p| !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p))
        .count()
}

fn check_map(v: &Var<'_>, what: &str) -> Result<()> {
    if !v.value().is_finite() {
        return Err(Error::NonFinite(format!("{what} discriminator map")));
    }
    Ok(())
}

/// `mean(-ln p)` with clamping.
fn neg_log<'t>(p: Var<'t>) -> Var<'t> {
    -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln().mean()
}

/// `mean(-ln(1 - p))` with clamping.
fn neg_log_complement<'t>(p: Var<'t>) -> Var<'t> {
    -(-p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .add_scalar(1.0)
        .ln()
        .mean()
}

/// Image adversarial loss on probability maps of `D_i`.
/// `loss_d = -[ln D(I_s) + ln D(I_t) + ln(1 - D(I_fake))]`,
/// `loss_g = -ln D(I_fake)`.
pub fn adv_image_var<'t>(
    d_real_s: Var<'t>,
    d_real_t: Var<'t>,
    d_fake: Var<'t>,
) -> Result<AdvLoss<Var<'t>>> {
    for (v, w) in [
        (&d_real_s, "source"),
        (&d_real_t, "target"),
        (&d_fake, "fake"),
    ] {
        check_map(v, w)?;
    }
    let clamped = clamped_count(&d_real_s) + clamped_count(&d_real_t) + clamped_count(&d_fake);
    Ok(AdvLoss {
        loss_d: neg_log(d_real_s) + neg_log(d_real_t) + neg_log_complement(d_fake),
        loss_g: neg_log(d_fake),
        clamped,
    })
}

/// Appearance adversarial loss on maps of `D_a`: a same-domain real pair
/// against the (target, translated) pair.
pub fn adv_appearance_var<'t>(d_same: Var<'t>, d_cross: Var<'t>) -> Result<AdvLoss<Var<'t>>> {
    check_map(&d_same, "same-domain")?;
    check_map(&d_cross, "translated-pair")?;
    let clamped = clamped_count(&d_same) + clamped_count(&d_cross);
    Ok(AdvLoss {
        loss_d: neg_log(d_same) + neg_log_complement(d_cross),
        loss_g: neg_log(d_cross),
        clamped,
    })
}

/// Non-saturating generator term `-ln D(fake)` alone, with its clamp count.
pub fn adv_generator_var<'t>(d_fake: Var<'t>) -> Result<(Var<'t>, usize)> {
    check_map(&d_fake, "fake")?;
    Ok((neg_log(d_fake), clamped_count(&d_fake)))
}

fn eval_adv(
    maps: &[&Tensor],
    f: impl for<'t> Fn(&[Var<'t>]) -> Result<AdvLoss<Var<'t>>>,
) -> Result<AdvLoss<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = maps.iter().map(|m| tape.constant((*m).clone())).collect();
    let l = f(&vars)?;
    Ok(AdvLoss {
        loss_d: l.loss_d.item(),
        loss_g: l.loss_g.item(),
        clamped: l.clamped,
    })
}

pub fn adv_image(d_real_s: &Tensor, d_real_t: &Tensor, d_fake: &Tensor) -> Result<AdvLoss<f64>> {
    eval_adv(&[d_real_s, d_real_t, d_fake], |v| {
        adv_image_var(v[0], v[1], v[2])
    })
}

pub fn adv_appearance(d_same: &Tensor, d_cross: &Tensor) -> Result<AdvLoss<f64>> {
    eval_adv(&[d_same, d_cross], |v| adv_appearance_var(v[0], v[1]))
}

/// Mean absolute difference.
pub fn l1_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "L1 shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a - b).abs().mean())
}

pub fn rec_self(reconstruction: &Image, original: &Image) -> Result<f64> {
    reconstruction.mean_abs_diff(original)
}

/// Same L1 form as [`rec_self`], applied to the cycle reconstruction.
pub fn rec_cycle(cycled: &Image, original: &Image) -> Result<f64> {
    cycled.mean_abs_diff(original)
}

/// `max(0, d(f_s, f_st) - d(f_s, f_neg) + m_c)` with `d` the mean squared
/// elementwise difference.
pub fn cons_content_var<'t>(
    f_s: Var<'t>,
    f_st: Var<'t>,
    f_neg: Var<'t>,
    m_c: f64,
) -> Result<Var<'t>> {
    let s = f_s.shape();
    if f_st.shape() != s || f_neg.shape() != s {
        return Err(Error::validation(
            "content consistency: feature shapes differ",
        ));
    }
    let d_pos = (f_s - f_st).square().mean();
    let d_neg = (f_s - f_neg).square().mean();
    Ok((d_pos - d_neg).add_scalar(m_c).relu())
}

pub fn cons_content(
    f_s: &ContentFeature,
    f_st: &ContentFeature,
    f_neg: &ContentFeature,
    m_c: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let [a, b, c] = [f_s, f_st, f_neg].map(|f| tape.constant(f.tensor().clone()));
    Ok(cons_content_var(a, b, c, m_c)?.item())
}

/// `max(0, 1 - cos(w_t, w_st) + cos(w_t, w_neg))` on flattened weights.
pub fn cons_appearance_var<'t>(w_t: Var<'t>, w_st: Var<'t>, w_neg: Var<'t>) -> Result<Var<'t>> {
    let s = w_t.shape();
    if w_st.shape() != s || w_neg.shape() != s {
        return Err(Error::validation(
            "appearance consistency: filter shapes differ",
        ));
    }
    let pos = w_t.cosine_similarity(w_st)?;
    let neg = w_t.cosine_similarity(w_neg)?;
    Ok((neg - pos).add_scalar(1.0).relu())
}

pub fn cons_appearance(
    w_t: &AppearanceFilter,
    w_st: &AppearanceFilter,
    w_neg: &AppearanceFilter,
) -> Result<f64> {
    let tape = Tape::new();
    let [a, b, c] = [w_t, w_st, w_neg].map(|w| tape.constant(w.weights().clone()));
    Ok(cons_appearance_var(a, b, c)?.item())
}

/// InfoNCE: `-ln softmax(z_q·z_pos/τ ; z_q·z_i/τ)[0]`.
pub fn nce_var<'t>(
    z_q: Var<'t>,
    z_pos: Var<'t>,
    negatives: &[Var<'t>],
    tau: f64,
) -> Result<Var<'t>> {
    if negatives.is_empty() {
        return Err(Error::validation("NCE needs at least one negative"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!(
            "NCE temperature must be positive, got {tau}"
        )));
    }
    let dim = z_q.shape();
    if z_pos.shape() != dim || negatives.iter().any(|n| n.shape() != dim) {
        return Err(Error::validation("NCE embeddings differ in dimension"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    let pos = z_q.dot(z_pos).scale(1.0 / tau);
    logits.push(pos);
    logits.extend(negatives.iter().map(|n| z_q.dot(*n).scale(1.0 / tau)));
    Ok(stack(&logits).logsumexp() - pos)
}

pub fn nce(z_q: &Embedding, z_pos: &Embedding, negatives: &[Embedding], tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let v = |e: &Embedding| tape.constant(Tensor::vector(e.values().to_vec()));
    let negs: Vec<Var<'_>> = negatives.iter().map(v).collect();
    Ok(nce_var(v(z_q), v(z_pos), &negs, tau)?.item())
}

/// The seven terms of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub adv_i: T,
    pub adv_a: T,
    pub rec_self: T,
    pub rec_cyc: T,
    pub cons_c: T,
    pub cons_a: T,
    pub nce: T,
}

pub const PART_NAMES: [&str; 7] = [
    "adv_i", "adv_a", "rec_self", "rec_cyc", "cons_c", "cons_a", "nce",
];

impl<T: Copy> LossParts<T> {
    pub fn as_array(&self) -> [T; 7] {
        [
            self.adv_i,
            self.adv_a,
            self.rec_self,
            self.rec_cyc,
            self.cons_c,
            self.cons_a,
            self.nce,
        ]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> LossParts<U> {
        LossParts {
            adv_i: f(self.adv_i),
            adv_a: f(self.adv_a),
            rec_self: f(self.rec_self),
            rec_cyc: f(self.rec_cyc),
            cons_c: f(self.cons_c),
            cons_a: f(self.cons_a),
            nce: f(self.nce),
        }
    }
}

impl<T: Copy + Add<Output = T> + Mul<f64, Output = T>> LossParts<T> {
    /// Weighted sum; adversarial terms carry weight 1.
    pub fn weighted_sum(&self, b: &Betas) -> T {
        self.adv_i
            + self.adv_a
            + self.rec_self * b.rs
            + self.rec_cyc * b.rc
            + self.cons_c * b.cc
            + self.cons_a * b.ca
            + self.nce * b.nce
    }
}

/// Names the first non-finite term.
pub fn check_finite(parts: &LossParts<f64>) -> Result<()> {
    for (name, v) in PART_NAMES.iter().zip(parts.as_array()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term '{name}' = {v}")));
        }
    }
    Ok(())
}

/// Generator-side objective for already-evaluated terms.
pub fn total(parts: &LossParts<f64>, betas: &Betas) -> Result<f64> {
    check_finite(parts)?;
    Ok(parts.weighted_sum(betas))
}

/// Discriminator-side objective: the two adversarial terms.
pub fn discriminator_total(adv_i: f64, adv_a: f64) -> Result<f64> {
    for (name, v) in [("adv_i", adv_i), ("adv_a", adv_a)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss term '{name}' = {v}"
            )));
        }
    }
    Ok(adv_i + adv_a)
}
