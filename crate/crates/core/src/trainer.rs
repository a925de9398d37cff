//! Domain-pair sampling, the alternating discriminator/generator update, and run management.
//!
//! One step samples two (source, target) pairs, translates both sources,
//! updates the discriminator against the translations held constant, then
//! updates the generator and projection heads against the updated (frozen)
//! discriminator. All randomness after initialization comes from the state's
//! training stream, so a checkpoint fixes every later step.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint;
use crate::config::{Preset, TrainConfig};
use crate::dataset::{DatasetIndex, Split, SplitData};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{self, DPairParts, DomainPair, GPairParts, LossReport, TermWeights};
use crate::nets::{self, Discriminator, Encoded, Generator, ProjectionHeads};
use crate::optim::{self, AdamHyper, Moments};
use crate::seed::{self, Stream};
use crate::types::{DomainLabel, Image};

/// Network-ready images of the training split; `seg[i]` is the map of `sim[i]`.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sim: Vec<Image>,
    pub seg: Vec<Image>,
    pub real: Vec<Image>,
}

impl TrainData {
    pub fn from_split(split: &SplitData) -> Result<Self> {
        Ok(Self {
            sim: split.images(DomainLabel::Sim)?,
            seg: split.images(DomainLabel::Seg)?,
            real: split.images(DomainLabel::Real)?,
        })
    }

    pub fn images(&self, domain: DomainLabel) -> &[Image] {
        match domain {
            DomainLabel::Sim => &self.sim,
            DomainLabel::Real => &self.real,
            DomainLabel::Seg => &self.seg,
        }
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.sim.first().ok_or_else(|| Error::Dataset("training split has no images".into()))?;
        Ok((first.height(), first.width()))
    }

    pub fn batch(&self, domain: DomainLabel, idx: &[usize]) -> Result<Tensor> {
        let imgs = self.images(domain);
        Image::batch(&idx.iter().map(|&i| &imgs[i]).collect::<Vec<_>>())
    }
}

/// The two pairs of one step. Presets other than the multi-domain one use fixed pairs.
pub fn sample_pairs<R: Rng>(rng: &mut R, preset: Preset) -> [DomainPair; 2] {
    use DomainLabel::*;
    let fixed = |s, t| DomainPair { source: s, target: t };
    match preset {
        Preset::Cut => [fixed(Sim, Real), fixed(Sim, Real)],
        Preset::CutS | Preset::CutSc => [fixed(Sim, Real), fixed(Seg, Real)],
        Preset::ConPres => {
            let all = DomainPair::all();
            [all[rng.random_range(0..all.len())], all[rng.random_range(0..all.len())]]
        }
    }
}

/// Independent uniform draws (with replacement) of source and target indices.
pub fn fetch_batch<R: Rng>(
    data: &TrainData,
    pair: DomainPair,
    rng: &mut R,
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut draw = |d: DomainLabel| -> Result<Vec<usize>> {
        let n = data.images(d).len();
        if n == 0 {
            return Err(Error::Dataset(format!("no {d} images in the training split")));
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    };
    let src = draw(pair.source)?;
    let tgt = draw(pair.target)?;
    Ok((src, tgt))
}

/// Indices of everything one step reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBatch {
    pub pairs: [DomainPair; 2],
    pub sources: [Vec<usize>; 2],
    pub targets: [Vec<usize>; 2],
    /// Sim and seg sources are filename-aligned for the regularizer.
    pub paired: bool,
}

pub fn sample_step<R: Rng>(data: &TrainData, cfg: &TrainConfig, rng: &mut R) -> Result<StepBatch> {
    let pairs = sample_pairs(rng, cfg.preset);
    let (s0, t0) = fetch_batch(data, pairs[0], rng, cfg.batch_size)?;
    let (mut s1, t1) = fetch_batch(data, pairs[1], rng, cfg.batch_size)?;
    let paired = cfg.preset.terms().reg && losses::reg_indicator(&pairs);
    if paired {
        s1 = s0.clone();
    }
    Ok(StepBatch { pairs, sources: [s0, s1], targets: [t0, t1], paired })
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub image_size: (usize, usize),
    pub step: u64,
    pub gen: Generator,
    pub disc: Discriminator,
    pub heads: ProjectionHeads,
    pub opt_gen: Moments,
    pub opt_disc: Moments,
    pub opt_heads: Moments,
    pub rng: ChaCha8Rng,
    /// Reports of the steps run in this process.
    pub history: Vec<LossReport>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_toml: String,
    image_size: (usize, usize),
    step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    adam_steps: [u64; 3],
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

impl TrainState {
    pub fn new(config: TrainConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let init = config.init;
        let gen = Generator::with_init(config.gen_width, seed::derive(s, 0), init);
        let disc = Discriminator::with_init(config.disc_width, image_size, seed::derive(s, 1), init);
        let heads = ProjectionHeads::with_init(
            &config.nce_layers(),
            config.gen_width,
            config.proj_hidden,
            config.embed_dim,
            seed::derive(s, 2),
            init,
        );
        Ok(Self {
            opt_gen: Moments::new(&gen.params),
            opt_disc: Moments::new(&disc.params),
            opt_heads: Moments::new(&heads.params),
            gen,
            disc,
            heads,
            rng: seed::rng(s, Stream::Training),
            image_size,
            step: 0,
            history: Vec::new(),
            config,
        })
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper::new(self.config.lr, self.config.betas, self.config.weight_decay)
    }

    /// Writes parameters, optimizer moments, config and RNG position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config_toml: self.config.to_toml(),
            image_size: self.image_size,
            step: self.step,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_steps: [self.opt_gen.t, self.opt_disc.t, self.opt_heads.t],
        };
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (store, mom, tag) in [
            (&self.gen.params, &self.opt_gen, "gen"),
            (&self.disc.params, &self.opt_disc, "disc"),
            (&self.heads.params, &self.opt_heads, "proj"),
        ] {
            for (k, (name, t)) in store.iter().enumerate() {
                tensors.push((name.to_string(), t));
                tensors.push((format!("adam.{tag}.m.{name}"), &mom.m[k]));
                tensors.push((format!("adam.{tag}.v.{name}"), &mom.v[k]));
            }
        }
        checkpoint::write_archive(path, serde_json::to_value(&meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read_archive(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        let config = TrainConfig::parse(&meta.config_toml, &[])?;
        let mut state = TrainState::new(config, meta.image_size)?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (store, mom, tag) in [
            (&mut state.gen.params, &mut state.opt_gen, "gen"),
            (&mut state.disc.params, &mut state.opt_disc, "disc"),
            (&mut state.heads.params, &mut state.opt_heads, "proj"),
        ] {
            let ids: Vec<_> = store.ids().collect();
            for (k, id) in ids.into_iter().enumerate() {
                let name = store.name(id).to_string();
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = take(&name, &shape)?;
                mom.m[k] = take(&format!("adam.{tag}.m.{name}"), &shape)?;
                mom.v[k] = take(&format!("adam.{tag}.v.{name}"), &shape)?;
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        [state.opt_gen.t, state.opt_disc.t, state.opt_heads.t] = meta.adam_steps;
        let seed: [u8; 32] =
            unhex(&meta.rng_seed).and_then(|v| v.try_into().ok()).ok_or_else(|| bad("malformed rng seed".into()))?;
        let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| bad("malformed rng position".into()))?;
        state.rng = ChaCha8Rng::from_seed(seed);
        state.rng.set_stream(meta.rng_stream);
        state.rng.set_word_pos(word_pos);
        state.step = meta.step;
        Ok(state)
    }
}

/// Outcome of one step beyond the loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub pairs: [DomainPair; 2],
    pub reg_active: bool,
    pub weights: TermWeights,
    pub losses: LossReport,
    /// Global gradient norms before clipping.
    pub grad_norm_d: f64,
    pub grad_norm_g: f64,
}

fn to_f64(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).to_f64()
}

fn seed_of(g: &Graph, v: Var, grad: &[f64], scale: f64) -> (Var, Tensor) {
    let scaled: Vec<f64> = grad.iter().map(|x| x * scale).collect();
    (v, Tensor::from_f64(g.shape(v), &scaled))
}

/// Mean class loss over a `[B, 3, 1, 1]` logit batch, with its gradient.
fn cls_batch(g: &Graph, logits: Var, label: DomainLabel) -> (f64, Vec<f64>) {
    let vals = to_f64(g, logits);
    let b = vals.len() / 3;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(vals.len());
    for row in vals.chunks(3) {
        let (v, gr) = losses::cls_loss(row, label);
        total += v;
        grad.extend(gr.into_iter().map(|x| x / b as f64));
    }
    (total / b as f64, grad)
}

/// Generator forward on both sources; the graph is extended by the generator phase.
struct GenPass {
    g: Graph,
    xs: [Var; 2],
    fakes: [Var; 2],
    encs: [Encoded; 2],
}

fn gen_pass(gen: &Generator, data: &TrainData, batch: &StepBatch) -> Result<GenPass> {
    let mut g = Graph::new();
    let mut run = |i: usize| -> Result<(Var, Var, Encoded)> {
        let p = batch.pairs[i];
        let x = g.constant(data.batch(p.source, &batch.sources[i])?);
        let (fake, enc) = gen.forward(&mut g, x, &vec![p.target; batch.sources[i].len()]);
        Ok((x, fake, enc))
    };
    let (x0, f0, e0) = run(0)?;
    let (x1, f1, e1) = run(1)?;
    Ok(GenPass { g, xs: [x0, x1], fakes: [f0, f1], encs: [e0, e1] })
}

fn non_finite(report: &LossReport, step: u64) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFiniteLoss { term: term.into(), step, dump: None }),
        None => Ok(()),
    }
}

/// Discriminator losses and gradients with the translations held constant.
fn disc_gradients(
    disc: &Discriminator,
    data: &TrainData,
    batch: &StepBatch,
    pass: &GenPass,
    w: &TermWeights,
) -> Result<([DPairParts; 2], Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let mut seeds = Vec::new();
    let mut parts = [DPairParts::default(); 2];
    for i in 0..2 {
        let p = batch.pairs[i];
        let y = g.constant(data.batch(p.target, &batch.targets[i])?);
        let fake = g.constant(pass.g.value(pass.fakes[i]).clone());
        let dr = disc.forward(&mut g, y)?;
        let df = disc.forward(&mut g, fake)?;
        let (v, gr, gf) = losses::lsgan_d(&to_f64(&g, dr.patch), &to_f64(&g, df.patch))?;
        parts[i].gan_d = v;
        seeds.push(seed_of(&g, dr.patch, &gr, w.gan));
        seeds.push(seed_of(&g, df.patch, &gf, w.gan));
        if w.cls_r > 0.0 {
            let x = g.constant(pass.g.value(pass.xs[i]).clone());
            let dx = disc.forward(&mut g, x)?;
            let (v, gl) = cls_batch(&g, dx.logits, p.source);
            parts[i].cls_r = v;
            seeds.push(seed_of(&g, dx.logits, &gl, w.cls_r));
        }
    }
    let mut grads = g.backward(seeds);
    Ok((parts, grads.take_store(&disc.params)))
}

/// Adds the contrastive term between key and query encoder taps; returns its value.
#[allow(clippy::too_many_arguments)]
fn nce_term<R: Rng>(
    g: &mut Graph,
    heads: &ProjectionHeads,
    keys: &Encoded,
    queries: &Encoded,
    cfg: &TrainConfig,
    weight: f64,
    rng: &mut R,
    seeds: &mut Vec<(Var, Tensor)>,
) -> Result<f64> {
    let layers = heads.layers().to_vec();
    let sizes = nets::tap_sizes(g, keys, &layers);
    let n = g.shape(keys.taps[0])[0];
    let mut total = 0.0;
    for b in 0..n {
        let locs = nets::sample_locations(&sizes, cfg.patches_per_layer, rng)?;
        for (l, &layer) in layers.iter().enumerate() {
            let k = heads.project(g, layer, keys.tap(layer), b, &locs[l]);
            let q = heads.project(g, layer, queries.tap(layer), b, &locs[l]);
            // Keys are treated as constants.
            let (v, dq, _) = losses::patch_nce(&to_f64(g, q), &to_f64(g, k), cfg.embed_dim, cfg.tau)?;
            total += v / n as f64;
            seeds.push(seed_of(g, q, &dq, weight / n as f64));
        }
    }
    Ok(total)
}

/// Generator-phase losses and output gradient seeds against a frozen discriminator.
#[allow(clippy::too_many_arguments)]
fn gen_phase<R: Rng>(
    gen: &Generator,
    disc: &Discriminator,
    heads: &ProjectionHeads,
    cfg: &TrainConfig,
    data: &TrainData,
    batch: &StepBatch,
    pass: &mut GenPass,
    w: &TermWeights,
    rng: &mut R,
) -> Result<([GPairParts; 2], f64, Vec<(Var, Tensor)>)> {
    let g = &mut pass.g;
    g.freeze(&disc.params);
    let mut seeds = Vec::new();
    let mut parts = [GPairParts::default(); 2];
    for i in 0..2 {
        let p = batch.pairs[i];
        let bsz = batch.sources[i].len();
        let fake = pass.fakes[i];

        let out = disc.forward(g, fake)?;
        let (v, gr) = losses::lsgan_g(&to_f64(g, out.patch));
        parts[i].gan_g = v;
        seeds.push(seed_of(g, out.patch, &gr, w.gan));
        if w.cls_f > 0.0 {
            let (v, gl) = cls_batch(g, out.logits, p.target);
            parts[i].cls_f = v;
            seeds.push(seed_of(g, out.logits, &gl, w.cls_f));
        }

        let enc_fake = gen.encode(g, fake);
        parts[i].nce_src = nce_term(g, heads, &pass.encs[i], &enc_fake, cfg, w.nce, rng, &mut seeds)?;

        let y = g.constant(data.batch(p.target, &batch.targets[i])?);
        let (idt, enc_y) = gen.forward(g, y, &vec![p.target; bsz]);
        let enc_idt = gen.encode(g, idt);
        parts[i].nce_idt = nce_term(g, heads, &enc_y, &enc_idt, cfg, w.nce, rng, &mut seeds)?;

        if w.cyc > 0.0 {
            let rec = gen.decode(g, &enc_fake, &vec![p.source; bsz]);
            let (v, _, grec) = losses::cyc_loss(&to_f64(g, pass.xs[i]), &to_f64(g, rec))?;
            parts[i].cyc = v;
            seeds.push(seed_of(g, rec, &grec, w.cyc));
        }
    }

    let mut reg = 0.0;
    if w.reg > 0.0 {
        let find = |d: DomainLabel| batch.pairs.iter().position(|p| p.source == d).expect("indicator implies source");
        let mut to_real = |i: usize| -> Var {
            if batch.pairs[i].target == DomainLabel::Real {
                pass.fakes[i]
            } else {
                gen.decode(g, &pass.encs[i], &vec![DomainLabel::Real; batch.sources[i].len()])
            }
        };
        let a = to_real(find(DomainLabel::Sim));
        let b = to_real(find(DomainLabel::Seg));
        let (v, ga, gb) = losses::reg_loss(&to_f64(g, a), &to_f64(g, b))?;
        reg = v;
        seeds.push(seed_of(g, a, &ga, w.reg));
        seeds.push(seed_of(g, b, &gb, w.reg));
    }
    Ok((parts, reg, seeds))
}

/// Generator and head gradients for one batch without touching any state.
///
/// Uses the current discriminator; intended for gradient probes.
pub fn generator_gradients<R: Rng>(
    state: &TrainState,
    data: &TrainData,
    batch: &StepBatch,
    rng: &mut R,
) -> Result<(LossReport, Vec<Option<Tensor>>, Vec<Option<Tensor>>)> {
    let w = losses::term_weights(&state.config, &batch.pairs)?;
    let mut pass = gen_pass(&state.gen, data, batch)?;
    let (parts, reg, seeds) =
        gen_phase(&state.gen, &state.disc, &state.heads, &state.config, data, batch, &mut pass, &w, rng)?;
    let mut report = LossReport::default();
    losses::compose_g(&mut report, &parts, reg, &w);
    let mut grads = pass.g.backward(seeds);
    Ok((report, grads.take_store(&state.gen.params), grads.take_store(&state.heads.params)))
}

/// One discriminator update followed by one generator and head update.
pub fn train_step(state: &mut TrainState, data: &TrainData, batch: &StepBatch) -> Result<StepStats> {
    let cfg = state.config.clone();
    let w = losses::term_weights(&cfg, &batch.pairs)?;
    let hp = state.hyper();
    let step = state.step + 1;
    let mut report = LossReport::default();

    let mut pass = gen_pass(&state.gen, data, batch)?;

    let (d_parts, mut d_grads) = disc_gradients(&state.disc, data, batch, &pass, &w)?;
    losses::compose_d(&mut report, &d_parts, &w);
    non_finite(&report, step)?;
    let grad_norm_d = optim::clip_global_norm(&mut [&mut d_grads], cfg.grad_clip_norm);
    optim::adamw_step(&mut state.disc.params, &mut state.opt_disc, &d_grads, &hp);

    let (g_parts, reg, seeds) =
        gen_phase(&state.gen, &state.disc, &state.heads, &cfg, data, batch, &mut pass, &w, &mut state.rng)?;
    losses::compose_g(&mut report, &g_parts, reg, &w);
    non_finite(&report, step)?;
    let mut grads = pass.g.backward(seeds);
    let mut gen_grads = grads.take_store(&state.gen.params);
    let mut head_grads = grads.take_store(&state.heads.params);
    drop(grads);
    drop(pass);
    let grad_norm_g = optim::clip_global_norm(&mut [&mut gen_grads, &mut head_grads], cfg.grad_clip_norm);
    if !grad_norm_g.is_finite() || !grad_norm_d.is_finite() {
        let term = if grad_norm_d.is_finite() { "grad_norm_g" } else { "grad_norm_d" };
        return Err(Error::NonFiniteLoss { term: term.into(), step, dump: None });
    }
    optim::adamw_step(&mut state.gen.params, &mut state.opt_gen, &gen_grads, &hp);
    optim::adamw_step(&mut state.heads.params, &mut state.opt_heads, &head_grads, &hp);

    state.step = step;
    state.history.push(report);
    Ok(StepStats {
        step,
        pairs: batch.pairs,
        reg_active: w.reg > 0.0,
        weights: w,
        losses: report,
        grad_norm_d,
        grad_norm_g,
    })
}

/// Translates each image independently, preserving order.
pub fn translate_images(gen: &Generator, images: &[Image], target: DomainLabel) -> Result<Vec<Image>> {
    images.iter().map(|x| gen.translate(x, target)).collect()
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Newest checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "ckpt") && best.as_ref().is_none_or(|b: &PathBuf| &p > b) {
            best = Some(p);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint; its architecture settings win over the passed config.
    pub resume: Option<PathBuf>,
    /// Validation images rendered per preview.
    pub preview_count: usize,
}

fn write_previews(
    run_dir: &Path,
    state: &TrainState,
    index: &DatasetIndex,
    val: &SplitData,
    count: usize,
) -> Result<()> {
    let dir = run_dir.join("val_previews");
    let mut jobs = vec![(DomainLabel::Sim, DomainLabel::Real)];
    if state.config.preset.terms().seg_pair {
        jobs.push((DomainLabel::Seg, DomainLabel::Real));
    }
    if state.config.preset == Preset::ConPres {
        jobs.push((DomainLabel::Seg, DomainLabel::Sim));
        jobs.push((DomainLabel::Sim, DomainLabel::Seg));
    }
    let sources_of = |d: DomainLabel| val.images(d);
    for (src, tgt) in jobs {
        let imgs = sources_of(src)?;
        for (k, img) in imgs.iter().take(count).enumerate() {
            let out = state.gen.translate(img, tgt)?;
            let stem = index.val.sim[k].trim_end_matches(".png");
            io::write_image(&dir.join(format!("step_{:06}_{stem}_{src}2{tgt}.png", state.step)), &out)?;
        }
    }
    Ok(())
}

fn dump_failure(run_dir: &Path, state: &TrainState, batch: &StepBatch, term: &str, step: u64) -> Result<PathBuf> {
    let path = run_dir.join(format!("nonfinite_step_{step:06}.json"));
    let dump = serde_json::json!({
        "step": step,
        "term": term,
        "batch": batch,
        "config": state.config.to_toml(),
        "last_finite": state.history.last(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Keeps log lines up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains on `data_dir` into `run_dir` until `config.steps`.
pub fn train(run_dir: &Path, data_dir: &Path, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainState> {
    let index = DatasetIndex::load(data_dir)?;
    let data = TrainData::from_split(&index.load_split(Split::Train)?)?;
    let val = index.load_split(Split::Val)?;
    let size = data.image_size()?;
    let mut state = match &opts.resume {
        Some(p) => {
            let mut s = TrainState::load(p)?;
            s.config.steps = config.steps;
            s.config.checkpoint_every = config.checkpoint_every;
            s.config.preview_every = config.preview_every;
            s
        }
        None => TrainState::new(config.clone(), size)?,
    };
    if state.image_size != size {
        return Err(Error::Dataset(format!("dataset images are {size:?}, checkpoint expects {:?}", state.image_size)));
    }
    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    std::fs::create_dir_all(run_dir.join("val_previews")).map_err(|e| Error::io(run_dir, e))?;
    let snap = run_dir.join("config.snapshot");
    std::fs::write(&snap, state.config.to_toml()).map_err(|e| Error::io(&snap, e))?;
    let log_path = run_dir.join("log.jsonl");
    if opts.resume.is_some() {
        truncate_log(&log_path, state.step)?;
    } else if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log =
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    if state.step == 0 {
        state.save(&checkpoint_path(run_dir, 0))?;
    }
    let total = state.config.steps;
    while state.step < total {
        let batch = sample_step(&data, &state.config, &mut state.rng)?;
        let stats = match train_step(&mut state, &data, &batch) {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { term, step, .. }) => {
                let dump = dump_failure(run_dir, &state, &batch, &term, step)?;
                return Err(Error::NonFiniteLoss { term, step, dump: Some(dump) });
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&stats)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let s = state.step;
        if (state.config.checkpoint_every > 0 && s % state.config.checkpoint_every == 0) || s == total {
            state.save(&checkpoint_path(run_dir, s))?;
        }
        if opts.preview_count > 0
            && ((state.config.preview_every > 0 && s % state.config.preview_every == 0) || s == total)
        {
            write_previews(run_dir, &state, &index, &val, opts.preview_count)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, PhantomConfig};

    fn small_cfg(preset: Preset) -> TrainConfig {
        TrainConfig {
            preset,
            gen_width: 2,
            disc_width: 2,
            proj_hidden: 8,
            embed_dim: 8,
            patches_per_layer: 16,
            steps: 3,
            ..TrainConfig::default()
        }
    }

    fn toy_data() -> TrainData {
        let mk = |salt: usize| -> Vec<Image> {
            (0..4)
                .map(|k| {
                    Image::new(
                        32,
                        32,
                        (0..1024)
                            .map(|i| ((((i * 7 + k * 131 + salt) % 61) as f32) / 30.0 - 1.0).clamp(-1.0, 1.0))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        TrainData { sim: mk(0), seg: mk(17), real: mk(33) }
    }

    #[test]
    fn fixed_presets_use_fixed_pairs() {
        use DomainLabel::*;
        let mut rng = seed::rng(1, Stream::Training);
        for _ in 0..10 {
            let p = sample_pairs(&mut rng, Preset::Cut);
            assert!(p.iter().all(|p| (p.source, p.target) == (Sim, Real)));
            let p = sample_pairs(&mut rng, Preset::CutSc);
            assert_eq!((p[1].source, p[1].target), (Seg, Real));
        }
    }

    #[test]
    fn multi_domain_pairs_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let all = DomainPair::all();
        let mut counts = [0u64; 6];
        let mut rng = seed::rng(11, Stream::Training);
        for _ in 0..30_000 {
            for p in sample_pairs(&mut rng, Preset::ConPres) {
                counts[all.iter().position(|q| *q == p).unwrap()] += 1;
            }
        }
        let expect = 60_000.0 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}");
        assert!(counts.iter().all(|&c| (c as f64 / 60_000.0 - 1.0 / 6.0).abs() < 0.01));
    }

    #[test]
    fn reported_weights_match_configuration() {
        use DomainLabel::*;
        let data = toy_data();
        let mut st = TrainState::new(small_cfg(Preset::ConPres), (32, 32)).unwrap();
        let batch = StepBatch {
            pairs: [DomainPair { source: Seg, target: Real }, DomainPair { source: Sim, target: Seg }],
            sources: [vec![1], vec![1]],
            targets: [vec![0], vec![2]],
            paired: true,
        };
        let stats = train_step(&mut st, &data, &batch).unwrap();
        assert!(stats.reg_active);
        let w = stats.weights;
        assert_eq!((w.cls_f, w.cls_r, w.reg, w.cyc), (0.1, 0.1, 1.0, 10.0));
        assert!(stats.losses.reg > 0.0);
    }

    #[test]
    fn saturated_discriminator_keeps_losses_finite() {
        let data = toy_data();
        for level in [1.0f32, -1.0, 1e3] {
            let mut st = TrainState::new(small_cfg(Preset::ConPres), (32, 32)).unwrap();
            let params = &mut st.disc.params;
            let w = params.id("disc.adv.weight").unwrap();
            params.get_mut(w).data_mut().fill(0.0);
            let b = params.id("disc.adv.bias").unwrap();
            params.get_mut(b).data_mut().fill(level);
            let batch = sample_step(&data, &st.config, &mut st.rng).unwrap();
            let stats = train_step(&mut st, &data, &batch).unwrap();
            assert!(stats.losses.first_non_finite().is_none(), "{level}");
            assert!(stats.grad_norm_d.is_finite() && stats.grad_norm_g.is_finite());
        }
    }

    #[test]
    fn translation_preserves_order_and_range() {
        let data = toy_data();
        let st = TrainState::new(small_cfg(Preset::ConPres), (32, 32)).unwrap();
        let out = translate_images(&st.gen, &data.sim, DomainLabel::Seg).unwrap();
        assert_eq!(out.len(), data.sim.len());
        for (k, img) in data.sim.iter().enumerate() {
            assert_eq!(out[k], st.gen.translate(img, DomainLabel::Seg).unwrap());
            assert!(out[k].data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn reg_steps_pair_sim_with_seg() {
        let data = toy_data();
        let cfg = small_cfg(Preset::ConPres);
        let mut rng = seed::rng(5, Stream::Training);
        let mut seen = 0;
        for _ in 0..200 {
            let b = sample_step(&data, &cfg, &mut rng).unwrap();
            if b.paired {
                assert_eq!(b.sources[0], b.sources[1]);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let data = toy_data();
        let run = || {
            let mut st = TrainState::new(small_cfg(Preset::ConPres), (32, 32)).unwrap();
            let mut out = Vec::new();
            for _ in 0..3 {
                let b = sample_step(&data, &st.config, &mut st.rng).unwrap();
                out.push(train_step(&mut st, &data, &b).unwrap());
            }
            out
        };
        let a = run();
        assert_eq!(a, run());
        for s in &a {
            assert!(s.losses.first_non_finite().is_none());
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_next_step() {
        let data = toy_data();
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::new(small_cfg(Preset::CutSc), (32, 32)).unwrap();
        let b = sample_step(&data, &st.config, &mut st.rng).unwrap();
        train_step(&mut st, &data, &b).unwrap();
        let p = dir.path().join("c.ckpt");
        st.save(&p).unwrap();
        let mut re = TrainState::load(&p).unwrap();
        let next = |s: &mut TrainState| {
            let b = sample_step(&data, &s.config, &mut s.rng).unwrap();
            train_step(s, &data, &b).unwrap()
        };
        assert_eq!(next(&mut st), next(&mut re));
    }

    #[test]
    fn reg_weight_has_no_effect_when_inactive() {
        use DomainLabel::*;
        let data = toy_data();
        let batch = StepBatch {
            pairs: [DomainPair { source: Sim, target: Real }, DomainPair { source: Real, target: Seg }],
            sources: [vec![0], vec![1]],
            targets: [vec![2], vec![3]],
            paired: false,
        };
        let grads = |lambda_reg: f64| {
            let cfg = TrainConfig { lambda_reg, ..small_cfg(Preset::ConPres) };
            let st = TrainState::new(cfg, (32, 32)).unwrap();
            let mut rng = seed::rng(3, Stream::Training);
            generator_gradients(&st, &data, &batch, &mut rng).unwrap()
        };
        let (r1, g1, h1) = grads(1.0);
        let (r2, g2, h2) = grads(1000.0);
        assert_eq!(r1.reg, 0.0);
        assert_eq!(r1, r2);
        assert_eq!(g1, g2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn zero_step_run_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        build_dataset(&data, 10, 2, (32, 32), &PhantomConfig::default()).unwrap();
        let run = dir.path().join("run");
        let cfg = TrainConfig { steps: 0, ..small_cfg(Preset::Cut) };
        let st = train(&run, &data, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(st.step, 0);
        assert!(checkpoint_path(&run, 0).exists());
        assert_eq!(std::fs::read_to_string(run.join("log.jsonl")).unwrap(), "");
    }
}
