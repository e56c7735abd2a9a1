//! Alternating discriminator / generator optimization, the epoch loop with
//! pair refreshing, metrics logging and checkpoint-based resumption.
//!
//! Randomness is derived from `(seed, epoch, step)`, so a run resumed from an
//! epoch-boundary checkpoint replays the uninterrupted run exactly.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_conv::{apply_vars, filter_vars};
use crate::autograd::{Tape, Var};
use crate::backbone::ConvBackbone;
use crate::checkpoint::{self, TrainState};
use crate::config::{NceView, TrainConfig};
use crate::datamodel::{load_manifest, DatasetRecord, Embedding, HyperParams, Image};
use crate::error::{Error, Result};
use crate::image_io::load_png;
use crate::losses::{self, LossParts};
use crate::networks::{self, Bound, Model, ModelParams, NetConfig, COLLECTIONS};
use crate::optim::Adam;
use crate::pairing;
use crate::par;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_STEP: u64 = 3;

/// SplitMix64 over the seed and a few stream coordinates.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [tag, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Weights `~ N(0, init_std²)` from the config seed, zero biases, GeM `p = 3`.
pub fn init_params(cfg: &TrainConfig, backbone_channels: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_INIT, 0, 0));
    networks::init_params(&cfg.net(), backbone_channels, cfg.hyper.init_std, &mut rng)
}

pub fn init_state(cfg: &TrainConfig, backbone: &ConvBackbone) -> TrainState {
    let params = init_params(cfg, backbone.out_channels());
    let optims = COLLECTIONS
        .iter()
        .map(|c| {
            Adam::new(
                params.collection(c).expect("known collection"),
                cfg.hyper.adam_beta1,
                cfg.hyper.adam_beta2,
            )
        })
        .collect();
    TrainState {
        params,
        optims,
        epoch: 0,
        step: 0,
    }
}

/// Constant for `epochs_flat` epochs, then `lr·(1 − (e − flat + 1)/decay)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let (flat, decay) = (cfg.hyper.epochs_flat, cfg.hyper.epochs_decay);
    if epoch >= flat + decay {
        return Err(Error::validation(format!(
            "epoch {epoch} outside schedule of {} epochs",
            flat + decay
        )));
    }
    if epoch < flat {
        return Ok(cfg.hyper.lr);
    }
    Ok(cfg.hyper.lr * (1.0 - (epoch - flat + 1) as f64 / decay as f64))
}

/// One training example: source, target, a second image of the target's
/// domain, a different-content negative, a different-domain negative, and
/// NCE negative images.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: Image,
    pub target: Image,
    pub target_pos: Image,
    pub source_neg: Image,
    pub target_neg: Image,
    /// Embedded with the current weights at each step and detached. Embeddings
    /// frozen at the epoch start would let the head lower the loss by moving
    /// every descriptor together, away from the stale bank.
    pub nce_negatives: Vec<Image>,
    /// Replaces the translated image in the NCE term when set.
    pub nce_view: Option<Image>,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Generator-side terms; adversarial entries are the non-saturating ones.
    pub parts: LossParts<f64>,
    pub d_i: f64,
    pub d_a: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub clamped: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub source: usize,
    pub target: usize,
    #[serde(flatten)]
    pub losses: StepLosses,
}

struct GenForward<'t> {
    translated: Var<'t>,
    target: Var<'t>,
    rec_self: Var<'t>,
    rec_cyc: Var<'t>,
    cons_c: Var<'t>,
    cons_a: Var<'t>,
    nce: Var<'t>,
}

struct GenBound<'t> {
    e_c: Bound<'t>,
    e_a: Bound<'t>,
    g: Bound<'t>,
    h: Bound<'t>,
}

fn backbone_const<'t>(tape: &'t Tape, bb: &ConvBackbone, img: Var<'t>) -> Result<Var<'t>> {
    Ok(bb.forward(tape, img)?.detach())
}

fn generator_forward<'t>(
    tape: &'t Tape,
    net: &NetConfig,
    hyper: &HyperParams,
    b: &GenBound<'t>,
    backbone: &ConvBackbone,
    batch: &Batch,
) -> Result<GenForward<'t>> {
    let i_s = tape.constant(batch.source.to_tensor());
    let i_t = tape.constant(batch.target.to_tensor());
    let i_sneg = tape.constant(batch.source_neg.to_tensor());
    let i_tneg = tape.constant(batch.target_neg.to_tensor());
    let groups = net.filter_groups;

    let f_s = networks::encode_content(net, &b.e_c, i_s)?;
    let (w_t, bias_t) = filter_vars(net, backbone_const(tape, backbone, i_t)?, &b.e_a)?;
    let (w_s, bias_s) = filter_vars(net, backbone_const(tape, backbone, i_s)?, &b.e_a)?;
    let (w_tneg, _) = filter_vars(net, backbone_const(tape, backbone, i_tneg)?, &b.e_a)?;

    let translated = networks::generate_image(net, &b.g, apply_vars(f_s, w_t, bias_t, groups)?)?;
    let self_rec = networks::generate_image(net, &b.g, apply_vars(f_s, w_s, bias_s, groups)?)?;
    let rec_self = losses::l1_var(self_rec, i_s)?;

    let f_st = networks::encode_content(net, &b.e_c, translated)?;
    let cycled = networks::generate_image(net, &b.g, apply_vars(f_st, w_s, bias_s, groups)?)?;
    let rec_cyc = losses::l1_var(cycled, i_s)?;

    let f_sneg = networks::encode_content(net, &b.e_c, i_sneg)?;
    let cons_c = losses::cons_content_var(f_s, f_st, f_sneg, hyper.m_c)?;

    let (w_st, _) = filter_vars(net, backbone.forward(tape, translated)?, &b.e_a)?;
    let cons_a = losses::cons_appearance_var(w_t, w_st, w_tneg)?;

    // Pooled descriptors drift faster than the stored center can follow, so
    // the NCE term centers on the mean over this step's negatives instead.
    let neg_pooled = batch
        .nce_negatives
        .iter()
        .map(|img| {
            let f = networks::encode_content(net, &b.e_c, tape.constant(img.to_tensor()))?;
            Ok(networks::pool(&b.h, f)?.detach())
        })
        .collect::<Result<Vec<Var<'t>>>>()?;
    let center = mean_of(tape, &neg_pooled)?;
    let z_s = networks::embed_pooled(&b.h, networks::pool(&b.h, f_s)?, center)?;
    let f_view = match &batch.nce_view {
        Some(img) => networks::encode_content(net, &b.e_c, tape.constant(img.to_tensor()))?,
        None => f_st,
    };
    let z_st = networks::embed_pooled(&b.h, networks::pool(&b.h, f_view)?, center)?;
    let negs = neg_pooled
        .into_iter()
        .map(|p| Ok(networks::embed_pooled(&b.h, p, center)?.detach()))
        .collect::<Result<Vec<Var<'t>>>>()?;
    let nce = losses::nce_var(z_s, z_st, &negs, hyper.tau)?;

    Ok(GenForward {
        translated,
        target: i_t,
        rec_self,
        rec_cyc,
        cons_c,
        cons_a,
        nce,
    })
}

fn mean_of<'t>(tape: &'t Tape, vs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::validation("NCE needs at least one negative"))?;
    let mut sum = (*first.value()).clone();
    for v in &vs[1..] {
        sum = sum.zip_map(&v.value(), |a, b| a + b);
    }
    Ok(tape.constant(sum.scale(1.0 / vs.len() as f64)))
}

/// Generator-side adversarial terms against fixed discriminators.
fn generator_adversarial<'t>(
    tape: &'t Tape,
    params: &ModelParams,
    fwd: &GenForward<'t>,
) -> Result<(Var<'t>, Var<'t>, usize)> {
    let d_i = params.d_i.bind(tape, false);
    let d_a = params.d_a.bind(tape, false);
    let fake = networks::discriminate(&d_i, fwd.translated)?;
    let cross = networks::discriminate_pair(&d_a, fwd.target, fwd.translated)?;
    let (adv_i, ci) = losses::adv_generator_var(fake)?;
    let (adv_a, ca) = losses::adv_generator_var(cross)?;
    Ok((adv_i, adv_a, ci + ca))
}

fn gen_parts<'t>(fwd: &GenForward<'t>, adv_i: Var<'t>, adv_a: Var<'t>) -> LossParts<Var<'t>> {
    LossParts {
        adv_i,
        adv_a,
        rec_self: fwd.rec_self,
        rec_cyc: fwd.rec_cyc,
        cons_c: fwd.cons_c,
        cons_a: fwd.cons_a,
        nce: fwd.nce,
    }
}

fn generator_checksum(p: &ModelParams) -> [u64; 4] {
    [
        p.e_c.checksum(),
        p.e_a.checksum(),
        p.g.checksum(),
        p.h.checksum(),
    ]
}

fn discriminator_checksum(p: &ModelParams) -> [u64; 2] {
    [p.d_i.checksum(), p.d_a.checksum()]
}

fn update(state: &mut TrainState, coll: &str, grads: &[Tensor], lr: f64) -> Result<()> {
    let k = COLLECTIONS
        .iter()
        .position(|c| *c == coll)
        .expect("known collection");
    let set = state.params.collection_mut(coll).expect("known collection");
    state.optims[k].update(set, grads, lr, coll)
}

/// One discriminator update followed by one generator-side update.
pub fn train_step(
    batch: &Batch,
    state: &mut TrainState,
    backbone: &ConvBackbone,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let net = cfg.net();
    let hyper = &cfg.hyper;

    let g_tape = Tape::new();
    let gb = GenBound {
        e_c: state.params.e_c.bind(&g_tape, true),
        e_a: state.params.e_a.bind(&g_tape, true),
        g: state.params.g.bind(&g_tape, true),
        h: state.params.h.bind(&g_tape, true),
    };
    let fwd = generator_forward(&g_tape, &net, hyper, &gb, backbone, batch)?;
    let fake_value = (*fwd.translated.value()).clone();

    // Discriminator half-step on a separate tape, translated image detached.
    let gen_before = generator_checksum(&state.params);
    let (d_i_loss, d_a_loss, clamped_d) = {
        let tape = Tape::new();
        let bi = state.params.d_i.bind(&tape, true);
        let ba = state.params.d_a.bind(&tape, true);
        let i_s = tape.constant(batch.source.to_tensor());
        let i_t = tape.constant(batch.target.to_tensor());
        let i_tpos = tape.constant(batch.target_pos.to_tensor());
        let fake = tape.constant(fake_value);
        let adv_i = losses::adv_image_var(
            networks::discriminate(&bi, i_s)?,
            networks::discriminate(&bi, i_t)?,
            networks::discriminate(&bi, fake)?,
        )?;
        let adv_a = losses::adv_appearance_var(
            networks::discriminate_pair(&ba, i_t, i_tpos)?,
            networks::discriminate_pair(&ba, i_t, fake)?,
        )?;
        let (li, la) = (adv_i.loss_d.item(), adv_a.loss_d.item());
        losses::discriminator_total(li, la)?;
        let grads = tape.backward(adv_i.loss_d + adv_a.loss_d)?;
        let gi = bi.collect_grads(&grads);
        let ga = ba.collect_grads(&grads);
        update(state, "d_i", &gi, lr)?;
        update(state, "d_a", &ga, lr)?;
        (li, la, adv_i.clamped + adv_a.clamped)
    };
    if generator_checksum(&state.params) != gen_before {
        return Err(Error::validation(
            "discriminator step modified generator-side parameters",
        ));
    }

    // Generator half-step against the updated discriminators.
    let disc_before = discriminator_checksum(&state.params);
    let (adv_i, adv_a, clamped_g) = generator_adversarial(&g_tape, &state.params, &fwd)?;
    let parts_var = gen_parts(&fwd, adv_i, adv_a);
    let parts = parts_var.map(|v| v.item());
    let total_g = losses::total(&parts, &hyper.betas)?;
    let grads = g_tape.backward(parts_var.weighted_sum(&hyper.betas))?;
    let collected = [
        ("e_c", gb.e_c.collect_grads(&grads)),
        ("e_a", gb.e_a.collect_grads(&grads)),
        ("g", gb.g.collect_grads(&grads)),
        ("h", gb.h.collect_grads(&grads)),
    ];
    for (coll, g) in &collected {
        update(state, coll, g, lr)?;
    }
    if discriminator_checksum(&state.params) != disc_before {
        return Err(Error::validation(
            "generator step modified discriminator parameters",
        ));
    }
    for (name, set) in state.params.iter() {
        if !set.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters of {name} after update"
            )));
        }
    }
    state.step += 1;
    Ok(StepLosses {
        parts,
        d_i: d_i_loss,
        d_a: d_a_loss,
        total_g,
        total_d: d_i_loss + d_a_loss,
        clamped: clamped_d + clamped_g,
    })
}

/// Generator-side loss terms of `batch` under `model`, without updating.
pub fn evaluate_batch(model: &Model, batch: &Batch, hyper: &HyperParams) -> Result<LossParts<f64>> {
    let tape = Tape::new();
    let p = &model.params;
    let gb = GenBound {
        e_c: p.e_c.bind(&tape, false),
        e_a: p.e_a.bind(&tape, false),
        g: p.g.bind(&tape, false),
        h: p.h.bind(&tape, false),
    };
    let fwd = generator_forward(&tape, &model.config, hyper, &gb, &model.backbone, batch)?;
    let (adv_i, adv_a, _) = generator_adversarial(&tape, p, &fwd)?;
    let parts = gen_parts(&fwd, adv_i, adv_a).map(|v| v.item());
    losses::check_finite(&parts)?;
    Ok(parts)
}

/// Training records with their images, loaded once.
pub struct TrainingSet {
    pub records: Vec<DatasetRecord>,
    pub images: Vec<Image>,
}

impl TrainingSet {
    pub fn load(manifest: &Path, image_size: usize) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let images = par::try_map_range(records.len(), |i| load_png(&records[i].resolve(base)))?;
        for (r, img) in records.iter().zip(&images) {
            if img.height() != image_size || img.width() != image_size {
                return Err(Error::validation(format!(
                    "{} is {}×{}, config expects {image_size}×{image_size}",
                    r.image_path,
                    img.height(),
                    img.width()
                )));
            }
        }
        let domains: HashSet<&str> = records.iter().map(|r| r.domain.name.as_str()).collect();
        if domains.len() < 2 {
            return Err(Error::validation("training needs at least two domains"));
        }
        Ok(Self { records, images })
    }
}

/// Epoch-frozen pairing tables.
pub struct EpochPlan {
    pub embeddings: Vec<Embedding>,
    pub assignments: Vec<pairing::PairAssignment>,
    /// Per record: indices never used as its NCE negatives.
    pub excluded: Vec<Vec<usize>>,
}

/// Sets the head's center to the mean pooled descriptor of `images` under
/// the current weights. Runs at every epoch start.
pub fn recenter_head(
    cfg: &TrainConfig,
    backbone: &ConvBackbone,
    params: &mut ModelParams,
    images: &[Image],
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::validation("no images to center the head on"));
    }
    let model = model_of(cfg, backbone, params);
    let pooled = par::try_map_range(images.len(), |i| model.pooled_descriptor(&images[i]))?;
    let mut mean = vec![0.0; pooled[0].numel()];
    for p in &pooled {
        for (m, v) in mean.iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    let n = images.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let (_, center) = params
        .h
        .entries_mut()
        .iter_mut()
        .find(|(name, _)| name == networks::HEAD_CENTER)
        .expect("head has a center");
    *center = Tensor::vector(mean);
    Ok(())
}

pub fn embed_all(model: &Model, images: &[Image]) -> Result<Vec<Embedding>> {
    par::try_map_range(images.len(), |i| model.embed_image(&images[i]))
}

/// Recomputes embeddings, mines positives among references and assigns a
/// cross-domain target to every record.
pub fn plan_epoch(model: &Model, set: &TrainingSet, cfg: &TrainConfig) -> Result<EpochPlan> {
    let embeddings = embed_all(model, &set.images)?;
    let refs: Vec<usize> = (0..set.records.len())
        .filter(|&i| set.records[i].is_reference && set.records[i].pose.is_some())
        .collect();
    let ref_records: Vec<DatasetRecord> = refs.iter().map(|&i| set.records[i].clone()).collect();
    let ref_emb: Vec<Embedding> = refs.iter().map(|&i| embeddings[i].clone()).collect();
    let mined = pairing::mine_positives(
        &ref_records,
        &ref_emb,
        cfg.k_candidates,
        cfg.hyper.rot_thresh_deg,
        cfg.hyper.trans_thresh_m,
    )?;

    // Positives are lifted to whole scenes where scene ids exist.
    let mut scene_pos: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut direct: HashMap<usize, Vec<usize>> = HashMap::new();
    for (qi, pos) in mined.positives.iter().enumerate() {
        let q = refs[qi];
        direct
            .entry(q)
            .or_default()
            .extend(pos.iter().map(|&p| refs[p]));
        if let Some(sq) = set.records[q].scene.as_deref() {
            let entry = scene_pos.entry(sq).or_default();
            entry.insert(sq);
            for &p in pos {
                if let Some(sp) = set.records[refs[p]].scene.as_deref() {
                    entry.insert(sp);
                }
            }
        }
    }
    let excluded = (0..set.records.len())
        .map(|i| {
            let mut ex: Vec<usize> = direct.get(&i).cloned().unwrap_or_default();
            if let Some(s) = set.records[i].scene.as_deref() {
                let mut scenes: HashSet<&str> = HashSet::from([s]);
                if let Some(more) = scene_pos.get(s) {
                    scenes.extend(more);
                }
                ex.extend((0..set.records.len()).filter(|&j| {
                    set.records[j]
                        .scene
                        .as_deref()
                        .is_some_and(|sj| scenes.contains(sj))
                }));
            }
            ex.sort_unstable();
            ex.dedup();
            ex
        })
        .collect();
    let assignments = pairing::refresh_source_target(&set.records, &embeddings)?;
    Ok(EpochPlan {
        embeddings,
        assignments,
        excluded,
    })
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize]) -> Option<usize> {
    (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
}

/// Per-channel random gain in `[0.6, 1.4]` and offset in `[-0.2, 0.2]`,
/// clamped to the pixel range.
pub fn color_jitter<R: Rng>(img: &Image, rng: &mut R) -> Image {
    let gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.4));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..=0.2));
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| {
            std::array::from_fn::<f64, 3, _>(|c| (px[c] * gain[c] + offset[c]).clamp(-1.0, 1.0))
        })
        .collect();
    Image::new(img.height(), img.width(), data).expect("clamped pixels of a valid image")
}

/// Draws the auxiliary images and NCE negatives for one assignment.
pub fn assemble_batch<R: Rng>(
    set: &TrainingSet,
    plan: &EpochPlan,
    a: &pairing::PairAssignment,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let n_neg = cfg.hyper.n_neg;
    let recs = &set.records;
    let (s, t) = (a.source_idx, a.target_idx);
    let n = recs.len();
    let same_domain: Vec<usize> = (0..n)
        .filter(|&j| j != t && recs[j].domain.name == recs[t].domain.name)
        .collect();
    let t_pos = pick(rng, &same_domain).unwrap_or(t);
    let other_content: Vec<usize> = (0..n)
        .filter(|&j| match (&recs[j].scene, &recs[s].scene) {
            (Some(a), Some(b)) => a != b,
            _ => j != s,
        })
        .collect();
    let s_neg = pick(rng, &other_content).ok_or_else(|| {
        Error::validation("no record with different content for the source negative")
    })?;
    let other_domain: Vec<usize> = (0..n)
        .filter(|&j| recs[j].domain.name != recs[t].domain.name)
        .collect();
    let t_neg = pick(rng, &other_domain).expect("the source is from another domain");
    let neg_idx = pairing::sample_nce_negatives(s, n, &plan.excluded[s], n_neg, rng.random())?;
    let nce_view =
        (cfg.nce_view == NceView::ColorJitter).then(|| color_jitter(&set.images[s], rng));
    Ok(Batch {
        source: set.images[s].clone(),
        target: set.images[t].clone(),
        target_pos: set.images[t_pos].clone(),
        source_neg: set.images[s_neg].clone(),
        target_neg: set.images[t_neg].clone(),
        nce_negatives: neg_idx.iter().map(|&j| set.images[j].clone()).collect(),
        nce_view,
    })
}

pub fn model_of(cfg: &TrainConfig, backbone: &ConvBackbone, params: &ModelParams) -> Model {
    Model {
        config: cfg.net(),
        params: params.clone(),
        backbone: backbone.clone(),
    }
}

/// Keeps only metrics lines of epochs before `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut keep = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)?;
        if rec.epoch < epoch {
            keep.push(line);
        }
    }
    let mut out = String::new();
    for l in keep {
        out.push_str(&l);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Options beyond the config.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions {
    /// Continue from `out_dir/checkpoint.bin` when present.
    pub resume: bool,
    /// Stop after this many completed epochs (counted from epoch 0).
    pub stop_after_epoch: Option<usize>,
}

pub fn fit(manifest: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    fit_with(
        manifest,
        cfg,
        FitOptions {
            resume: true,
            stop_after_epoch: None,
        },
    )
}

pub fn fit_with(manifest: &Path, cfg: &TrainConfig, opts: FitOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let set = TrainingSet::load(manifest, cfg.image_size)?;
    let backbone = cfg.load_backbone()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    std::fs::write(dir.join(CONFIG_FILE), cfg.render()).map_err(|e| Error::io(dir, e))?;

    let mut state = if opts.resume && ckpt_path.exists() {
        let ck = checkpoint::load(&ckpt_path)?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint in {} was written with a different config",
                dir.display()
            )));
        }
        truncate_metrics(&metrics_path, ck.state.epoch)?;
        log::info!("resuming from epoch {}", ck.state.epoch);
        ck.state
    } else {
        std::fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        let mut state = init_state(cfg, &backbone);
        recenter_head(cfg, &backbone, &mut state.params, &set.images)?;
        state
    };

    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let total = cfg.total_epochs();
    let end = opts.stop_after_epoch.map_or(total, |e| e.min(total));
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg)?;
        let model = model_of(cfg, &backbone, &state.params);
        let plan = plan_epoch(&model, &set, cfg)?;
        drop(model);
        let mut order = plan.assignments.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            TAG_EPOCH,
            epoch as u64,
            0,
        )));
        if cfg.steps_per_epoch > 0 {
            order.truncate(cfg.steps_per_epoch);
        }
        for (k, a) in order.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_STEP, epoch as u64, k as u64));
            let batch = assemble_batch(&set, &plan, a, cfg, &mut rng)?;
            let losses = train_step(&batch, &mut state, &backbone, cfg, lr)?;
            let rec = MetricsRecord {
                step: state.step,
                epoch,
                lr,
                source: a.source_idx,
                target: a.target_idx,
                losses,
            };
            serde_json::to_writer(&mut metrics, &rec)?;
            metrics
                .write_all(b"\n")
                .map_err(|e| Error::io(&metrics_path, e))?;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch += 1;
        recenter_head(cfg, &backbone, &mut state.params, &set.images)?;
        log::info!("epoch {epoch} done, step {}", state.step);
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == end {
            checkpoint::save(&ckpt_path, cfg, &backbone, &state)?;
        }
    }
    if !ckpt_path.exists() {
        checkpoint::save(&ckpt_path, cfg, &backbone, &state)?;
    }
    Ok(ckpt_path)
}
