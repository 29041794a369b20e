//! Layout generator: a conditional diffusion model over box geometry.
//!
//! Architecture notes. Each scene object becomes one token: its (possibly
//! noised) box geometry as raw coordinates plus their Fourier embedding,
//! concatenated with the phrase embedding and a visual slot. The raw
//! coordinates must ride along because noised geometry is unbounded while
//! every sin/cos octave is periodic with period 2, which would alias states
//! the denoiser has to separate. The visual slot carries the subject's
//! image embedding for the subject object and a learnable null vector for
//! everything else, which is how the model knows *which* box must fit the
//! subject. Tokens pass through pre-norm transformer blocks: self-attention
//! over objects, cross-attention against the pooled caption embedding (a
//! length-1 context), and a feed-forward layer. No positional encoding is
//! applied over object order, so the stack is permutation-equivariant by
//! construction. A sinusoidal timestep embedding is projected by a small MLP
//! and added to every token before the first block. The head maps each token
//! to a 4-dim noise prediction, trained with the usual epsilon objective;
//! geometry lives in [-1, 1] during diffusion and maps affinely to [0, 1]
//! box coordinates at the ends.
//!
//! Variable object counts are batched by padding to the batch max: padded
//! slots are masked out of attention keys and excluded from the loss.

use crate::data::{extract_subject, SceneSample};
use crate::diffusion::{forward_noise, Schedule, ScheduleKind};
use crate::encoders::{FourierEmbedder, TextEncoder, VisionEncoder, DEFAULT_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::layout::{BBox, Layout, ObjectSpec};
use crate::nn::{self, collect_grads, Adam, Ctx, ParamStore, Registrar};
use crate::rng::{derive_rng, randn, Stream};
use crate::tensor::{Scalar, Tape, Value};
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub fourier_freqs: usize,
    /// Phrase/visual/caption embedding dimension fed by the encoders.
    pub feature_dim: usize,
    pub encoder_seed: u64,
    pub t_max: usize,
    pub schedule: ScheduleKind,
}

impl Default for LayoutModelConfig {
    fn default() -> Self {
        LayoutModelConfig {
            width: 256,
            blocks: 4,
            heads: 4,
            ff_hidden: 512,
            fourier_freqs: 8,
            feature_dim: DEFAULT_FEATURE_DIM,
            encoder_seed: crate::encoders::DEFAULT_ENCODER_SEED,
            t_max: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl LayoutModelConfig {
    /// Raw geometry + its Fourier embedding + phrase embedding + visual slot.
    pub fn token_dim(&self) -> usize {
        self.geom_dim() + 2 * self.feature_dim
    }

    fn geom_dim(&self) -> usize {
        4 + 2 * 4 * self.fourier_freqs
    }
}

/// Per-scene conditioning, encoded once and reused across steps and chains.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    /// (N, feature_dim) phrase embeddings in object order.
    pub phrase: Array2<f32>,
    pub vis: Array1<f32>,
    pub caption: Array1<f32>,
    pub subject_index: usize,
}

impl EncodedScene {
    pub fn len(&self) -> usize {
        self.phrase.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phrase.nrows() == 0
    }
}

pub struct LayoutDenoiser<F: Scalar> {
    pub config: LayoutModelConfig,
    pub store: ParamStore<F>,
    pub schedule: Schedule,
    text: TextEncoder,
    vision: VisionEncoder,
    fourier: FourierEmbedder,
}

impl<F: Scalar> LayoutDenoiser<F> {
    pub fn new(config: LayoutModelConfig, seed: u64) -> Result<Self> {
        let schedule = Schedule::new(config.schedule, config.t_max)?;
        assert!(config.width % 2 == 0, "width must be even for the timestep embedding");
        assert!(config.width % config.heads == 0, "width must divide into heads");
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, Stream::ParamInit, &[]);
        let mut reg = Registrar::new(&mut store, &mut rng);
        let (w, d) = (config.width, config.feature_dim);
        reg.normal("null_vis", &[d], 0.02);
        reg.linear("in_proj", config.token_dim(), w);
        reg.linear("temb.fc1", w, w);
        reg.linear("temb.fc2", w, w);
        reg.linear("cap_proj", d, w);
        for i in 0..config.blocks {
            reg.layer_norm(&format!("block{i}.ln1"), w);
            reg.attention(&format!("block{i}.sa"), w);
            reg.layer_norm(&format!("block{i}.ln2"), w);
            reg.attention(&format!("block{i}.ca"), w);
            reg.layer_norm(&format!("block{i}.ln3"), w);
            reg.linear(&format!("block{i}.ff.fc1"), w, config.ff_hidden);
            reg.linear(&format!("block{i}.ff.fc2"), config.ff_hidden, w);
        }
        reg.layer_norm("final_ln", w);
        reg.linear("head", w, 4);
        let text = TextEncoder::new(config.feature_dim, config.encoder_seed);
        let vision = VisionEncoder::new(config.feature_dim, 4, config.encoder_seed);
        let fourier = FourierEmbedder::new(config.fourier_freqs);
        Ok(LayoutDenoiser { config, store, schedule, text, vision, fourier })
    }

    /// Rebuilds a model around restored parameters, verifying the inventory
    /// matches what `new` would have created.
    pub fn from_store(config: LayoutModelConfig, store: ParamStore<F>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, p) in reference.store.iter() {
            let q = store.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing layout parameter {name}"))
            })?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "layout parameter {name}: shape {:?}, expected {:?}",
                    q.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Checkpoint(format!(
                "layout store holds {} parameters, expected {}",
                store.len(),
                reference.store.len()
            )));
        }
        Ok(LayoutDenoiser { store, ..reference })
    }

    /// Encodes conditioning from explicit prompt parts. `objects` pairs each
    /// phrase with its is-subject flag; exactly one must be the subject.
    pub fn encode_prompt(
        &self,
        subject_image: &Image,
        objects: &[(String, bool)],
        caption: &str,
    ) -> Result<EncodedScene> {
        if objects.is_empty() {
            return Err(Error::InvalidArgument("layout conditioning: no objects".into()));
        }
        let n_subjects = objects.iter().filter(|(_, s)| *s).count();
        if n_subjects != 1 {
            return Err(Error::SubjectCount(n_subjects));
        }
        let subject_index = objects.iter().position(|(_, s)| *s).unwrap();
        let d = self.config.feature_dim;
        let mut phrase = Array2::zeros((objects.len(), d));
        for (i, (p, _)) in objects.iter().enumerate() {
            phrase.row_mut(i).assign(&self.text.encode(p)?);
        }
        Ok(EncodedScene {
            phrase,
            vis: self.vision.encode(subject_image)?,
            caption: self.text.encode(caption)?,
            subject_index,
        })
    }

    /// Encodes a dataset sample: phrases and caption from its layout, the
    /// visual embedding from the subject's tight mask crop.
    pub fn encode_sample(&self, sample: &SceneSample) -> Result<EncodedScene> {
        sample.validate()?;
        let (crop, _) = extract_subject(sample)?;
        let objects: Vec<(String, bool)> = sample
            .layout
            .objects
            .iter()
            .map(|o| (o.phrase.clone(), o.is_subject))
            .collect();
        self.encode_prompt(&crop, &objects, &sample.caption)
    }

    /// Noise predictions for a batch of scenes at per-scene timesteps.
    /// `geometry` rows live in diffusion space [-1, 1]. Returns (B, Nmax, 4);
    /// rows past a scene's length are padding.
    pub fn predict_eps(&self, batch: &[(&EncodedScene, &Array2<F>, usize)]) -> Result<Array3<F>> {
        let inputs = self.build_inputs(batch)?;
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, &inputs);
        let arr = tape.value(out).clone();
        if arr.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("layout denoiser output".into()));
        }
        Ok(arr.into_dimensionality::<ndarray::Ix3>().expect("output is (B, N, 4)"))
    }

    fn build_inputs(&self, batch: &[(&EncodedScene, &Array2<F>, usize)]) -> Result<TokenInputs<F>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("layout batch is empty".into()));
        }
        let b = batch.len();
        let n_max = batch.iter().map(|(s, _, _)| s.len()).max().unwrap();
        let d = self.config.feature_dim;
        let gdim = self.config.geom_dim();
        let mut geom_feat = Array3::<F>::zeros((b, n_max, gdim));
        let mut phrase_feat = Array3::<F>::zeros((b, n_max, d));
        let mut vis_feat = Array3::<F>::zeros((b, n_max, d));
        let mut null_sel = Array3::<F>::from_elem((b, n_max, 1), F::one());
        let mut caption_feat = Array3::<F>::zeros((b, 1, d));
        let mut temb = Array2::<F>::zeros((b, self.config.width));
        let mut valid = Array2::from_elem((b, n_max), false);
        for (bi, (scene, geom, t)) in batch.iter().enumerate() {
            let n = scene.len();
            assert_eq!(geom.dim(), (n, 4), "geometry rows must match scene objects");
            self.schedule.check_t(*t)?;
            for i in 0..n {
                valid[[bi, i]] = true;
                let g: Vec<f32> = (0..4).map(|j| geom[[i, j]].to_f64() as f32).collect();
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("layout geometry".into()));
                }
                for j in 0..4 {
                    geom_feat[[bi, i, j]] = geom[[i, j]];
                }
                for (k, e) in self.fourier.embed(&g).into_iter().enumerate() {
                    geom_feat[[bi, i, 4 + k]] = F::from_f64(e as f64);
                }
                for k in 0..d {
                    phrase_feat[[bi, i, k]] = F::from_f64(scene.phrase[[i, k]] as f64);
                }
            }
            let si = scene.subject_index;
            null_sel[[bi, si, 0]] = F::zero();
            for k in 0..d {
                vis_feat[[bi, si, k]] = F::from_f64(scene.vis[k] as f64);
                caption_feat[[bi, 0, k]] = F::from_f64(scene.caption[k] as f64);
            }
            for (k, e) in nn::sinusoidal(*t, self.config.width).into_iter().enumerate() {
                temb[[bi, k]] = F::from_f64(e);
            }
        }
        Ok(TokenInputs { geom_feat, phrase_feat, vis_feat, null_sel, caption_feat, temb, valid })
    }

    /// Builds the forward graph on `tape`. Returns the (B, Nmax, 4) output
    /// and the bound parameter map for gradient collection.
    fn forward(
        &self,
        tape: &mut Tape<F>,
        inputs: &TokenInputs<F>,
    ) -> (Value, indexmap::IndexMap<String, Value>) {
        let (b, n, _) = inputs.geom_feat.dim();
        let d = self.config.feature_dim;
        let w = self.config.width;
        let mut ctx = Ctx::new(tape, &self.store);

        let gp = {
            let mut cat = Array3::<F>::zeros((b, n, self.config.token_dim() - d));
            let gdim = self.config.geom_dim();
            cat.slice_mut(ndarray::s![.., .., ..gdim]).assign(&inputs.geom_feat);
            cat.slice_mut(ndarray::s![.., .., gdim..]).assign(&inputs.phrase_feat);
            ctx.constant(cat.into_dyn())
        };
        let vis_base = ctx.constant(inputs.vis_feat.clone().into_dyn());
        let sel = ctx.constant(inputs.null_sel.clone().into_dyn());
        let null = ctx.p("null_vis");
        let null3 = ctx.tape.reshape(null, &[1, 1, d]);
        let nullb = ctx.tape.broadcast(null3, &[b, n, d]);
        let selb = ctx.tape.broadcast(sel, &[b, n, d]);
        let null_contrib = ctx.tape.mul(nullb, selb);
        let vis = ctx.tape.add(vis_base, null_contrib);
        let tokens = ctx.tape.concat(&[gp, vis], 2);

        let mut x = nn::linear(&mut ctx, "in_proj", tokens);
        let te_in = ctx.constant(inputs.temb.clone().into_dyn());
        let te = nn::linear(&mut ctx, "temb.fc1", te_in);
        let te = ctx.tape.silu(te);
        let te = nn::linear(&mut ctx, "temb.fc2", te);
        let te3 = ctx.tape.reshape(te, &[b, 1, w]);
        let teb = ctx.tape.broadcast(te3, &[b, n, w]);
        x = ctx.tape.add(x, teb);

        let mask_arr = nn::attention_mask::<F>(&inputs.valid, self.config.heads, n);
        let mask = ctx.constant(mask_arr);
        let cap_in = ctx.constant(inputs.caption_feat.clone().into_dyn());
        let cap = nn::linear(&mut ctx, "cap_proj", cap_in);

        for i in 0..self.config.blocks {
            let h = nn::layer_norm(&mut ctx, &format!("block{i}.ln1"), x);
            let a = nn::attention(&mut ctx, &format!("block{i}.sa"), h, h, self.config.heads, Some(mask));
            x = ctx.tape.add(x, a);
            let h = nn::layer_norm(&mut ctx, &format!("block{i}.ln2"), x);
            let a = nn::attention(&mut ctx, &format!("block{i}.ca"), h, cap, self.config.heads, None);
            x = ctx.tape.add(x, a);
            let h = nn::layer_norm(&mut ctx, &format!("block{i}.ln3"), x);
            let f = nn::linear(&mut ctx, &format!("block{i}.ff.fc1"), h);
            let f = ctx.tape.silu(f);
            let f = nn::linear(&mut ctx, &format!("block{i}.ff.fc2"), f);
            x = ctx.tape.add(x, f);
        }
        let h = nn::layer_norm(&mut ctx, "final_ln", x);
        let out = nn::linear(&mut ctx, "head", h);
        (out, ctx.finish())
    }
}

struct TokenInputs<F: Scalar> {
    geom_feat: Array3<F>,
    phrase_feat: Array3<F>,
    /// Subject rows hold the visual embedding; all other rows are zero.
    vis_feat: Array3<F>,
    /// 1 where the learnable null vector occupies the visual slot.
    null_sel: Array3<F>,
    caption_feat: Array3<F>,
    temb: Array2<F>,
    valid: Array2<bool>,
}

/// Box coordinates [0, 1] to diffusion space [-1, 1], rows [cx, cy, w, h].
pub fn geometry_from_layout<F: Scalar>(layout: &Layout) -> Array2<F> {
    let n = layout.objects.len();
    let mut g = Array2::zeros((n, 4));
    for (i, o) in layout.objects.iter().enumerate() {
        let b = &o.bbox;
        for (j, v) in [b.cx, b.cy, b.w, b.h].into_iter().enumerate() {
            g[[i, j]] = F::from_f64(2.0 * v as f64 - 1.0);
        }
    }
    g
}

/// Smallest normalized box side a sampled layout may carry. 0.08 spans over
/// a pixel on the smallest supported canvas (16 px) with margin for f32
/// rounding, so every clamped box survives rescale-and-paste; it is also
/// well under the smallest real box the data grammar emits (4 px / 32).
pub const MIN_BOX_EXTENT: f64 = 0.08;

/// Diffusion-space row back to a valid box: affine to [0, 1], then clamp
/// size and recentre so the box sits inside the unit canvas.
pub fn clamp_geometry(row: &[f64; 4]) -> BBox {
    let to01 = |v: f64| (v + 1.0) / 2.0;
    let w = to01(row[2]).clamp(MIN_BOX_EXTENT, 1.0);
    let h = to01(row[3]).clamp(MIN_BOX_EXTENT, 1.0);
    let cx = to01(row[0]).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = to01(row[1]).clamp(h / 2.0, 1.0 - h / 2.0);
    BBox::new(cx as f32, cy as f32, w as f32, h as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LayoutTrainConfig {
    fn default() -> Self {
        LayoutTrainConfig { steps: 2000, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

/// Per-step loss trace.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
}

impl TrainLog {
    /// Mean loss over steps [from, to); clamped to the recorded range.
    pub fn mean_range(&self, from: usize, to: usize) -> f32 {
        let to = to.min(self.losses.len());
        let from = from.min(to);
        if from == to {
            return f32::NAN;
        }
        self.losses[from..to].iter().sum::<f32>() / (to - from) as f32
    }
}

/// Trains a fresh layout denoiser on `samples` with the epsilon objective.
pub fn train_layout_model<F: Scalar>(
    samples: &[SceneSample],
    model_config: &LayoutModelConfig,
    train_config: &LayoutTrainConfig,
) -> Result<(LayoutDenoiser<F>, TrainLog)> {
    let mut model = LayoutDenoiser::<F>::new(model_config.clone(), train_config.seed)?;
    let mut adam = Adam::new(train_config.lr);
    let log = train_layout_steps(&mut model, &mut adam, samples, train_config, 0)?;
    Ok((model, log))
}

/// Runs `train_config.steps` optimizer steps starting at global step
/// `start_step`, which keys the noise and timestep streams so a resumed run
/// never replays the steps before it. The data order reshuffles at each
/// entry; given the same checkpoint cadence, reruns are bit-identical.
pub fn train_layout_steps<F: Scalar>(
    model: &mut LayoutDenoiser<F>,
    adam: &mut Adam<F>,
    samples: &[SceneSample],
    train_config: &LayoutTrainConfig,
    start_step: u64,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("layout training set".into()));
    }
    let mut log = TrainLog::default();
    let encoded: Vec<(EncodedScene, Array2<F>)> = samples
        .iter()
        .map(|s| Ok((model.encode_sample(s)?, geometry_from_layout::<F>(&s.layout))))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut cursor = encoded.len(); // forces a shuffle on the first step
    let mut epoch = start_step;
    for step in (0..train_config.steps as u64).map(|s| s + start_step) {
        let mut picks = Vec::with_capacity(train_config.batch_size);
        for _ in 0..train_config.batch_size {
            if cursor >= order.len() {
                let mut r = derive_rng(train_config.seed, Stream::TrainShuffle, &[epoch]);
                order.shuffle(&mut r);
                epoch += 1;
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let mut rng_t = derive_rng(train_config.seed, Stream::TrainTimestep, &[step]);
        let mut rng_n = derive_rng(train_config.seed, Stream::TrainNoise, &[step]);

        let mut noised: Vec<(usize, Array2<F>, usize)> = Vec::new();
        let mut noise: Vec<Array2<F>> = Vec::new();
        for &idx in &picks {
            let (_, g0) = &encoded[idx];
            let t = rng_t.random_range(1..=model.config.t_max);
            let eps = randn::<F>(&[g0.nrows(), 4], &mut rng_n)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let g_t =
                forward_noise(&model.schedule, &g0.clone().into_dyn(), t, &eps.clone().into_dyn())?
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
            noised.push((idx, g_t, t));
            noise.push(eps);
        }
        let batch: Vec<(&EncodedScene, &Array2<F>, usize)> =
            noised.iter().map(|(idx, g_t, t)| (&encoded[*idx].0, g_t, *t)).collect();
        let (loss_val, by_name) = match denoising_loss(model, &batch, &noise) {
            Ok(x) => x,
            Err(Error::NonFinite(detail)) => return Err(Error::Diverged { step, detail }),
            Err(e) => return Err(e),
        };
        adam.step(&mut model.store, &by_name);
        log.losses.push(loss_val as f32);
    }
    if let Some(name) = model.store.find_non_finite() {
        return Err(Error::Diverged {
            step: start_step + train_config.steps as u64,
            detail: format!("non-finite parameter {name}"),
        });
    }
    Ok(log)
}

/// Masked mean-squared denoising loss for an explicit batch of (scene,
/// noised geometry, timestep) triples, with gradients by parameter name.
/// `noise` carries the injected noise the model must recover, row-matched
/// to each item's objects; padded slots are excluded from the mean. The
/// training loop runs on this, and it is public so the loss surface can be
/// probed directly, e.g. by finite-difference checks.
pub fn denoising_loss<F: Scalar>(
    model: &LayoutDenoiser<F>,
    batch: &[(&EncodedScene, &Array2<F>, usize)],
    noise: &[Array2<F>],
) -> Result<(f64, IndexMap<String, ArrayD<F>>)> {
    if batch.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "denoising loss: {} batch items vs {} noise tensors",
            batch.len(),
            noise.len()
        )));
    }
    for ((_, g_t, _), eps) in batch.iter().zip(noise) {
        if g_t.dim() != eps.dim() {
            return Err(Error::ShapeMismatch(format!(
                "denoising loss: geometry {:?} vs noise {:?}",
                g_t.dim(),
                eps.dim()
            )));
        }
    }
    let inputs = model.build_inputs(batch)?;

    let (b, n_max, _) = inputs.geom_feat.dim();
    let mut target = Array3::<F>::zeros((b, n_max, 4));
    let mut valid_count = 0usize;
    for (bi, eps) in noise.iter().enumerate() {
        let rows = eps.nrows();
        valid_count += rows;
        target.slice_mut(ndarray::s![bi, ..rows, ..]).assign(eps);
    }
    let valid_f = Array3::<F>::from_shape_fn((b, n_max, 1), |(bi, i, _)| {
        if inputs.valid[[bi, i]] {
            F::one()
        } else {
            F::zero()
        }
    });

    let mut tape = Tape::new();
    let (out, bound) = model.forward(&mut tape, &inputs);
    let tgt = tape.constant(target.into_dyn());
    let diff = tape.sub(out, tgt);
    let sq = tape.mul(diff, diff);
    let vmask = tape.constant(valid_f.into_dyn());
    let vb = tape.broadcast(vmask, &[b, n_max, 4]);
    let masked = tape.mul(sq, vb);
    let total = tape.sum_all(masked);
    let loss = tape.scale(total, 1.0 / (valid_count * 4) as f64);

    let loss_val = tape.value(loss)[IxDyn(&[])].to_f64();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("layout loss {loss_val}")));
    }
    let grads = tape.backward(loss);
    Ok((loss_val, collect_grads(&bound, &grads)))
}

/// Draws `k` layouts for one prompt by ancestral sampling over geometry.
/// Object order and phrases carry over from `objects`; boxes are clamped to
/// the unit canvas.
pub fn sample_layouts<F: Scalar>(
    model: &LayoutDenoiser<F>,
    subject_image: &Image,
    objects: &[(String, bool)],
    caption: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<Layout>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample_layouts: k must be >= 1".into()));
    }
    let scene = model.encode_prompt(subject_image, objects, caption)?;
    let n = scene.len();
    let mut out = Vec::with_capacity(k);
    for chain in 0..k {
        let mut rng = derive_rng(seed, Stream::Sample, &[chain as u64]);
        let z0 = crate::diffusion::sample::<F>(&model.schedule, &[n, 4], &mut rng, |z, t| {
            let g = z.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            let eps = model.predict_eps(&[(&scene, &g, t)])?;
            Ok(eps.index_axis(Axis(0), 0).to_owned().into_dyn())
        })?;
        let g = z0.into_dimensionality::<ndarray::Ix2>().unwrap();
        let specs: Vec<ObjectSpec> = objects
            .iter()
            .enumerate()
            .map(|(i, (phrase, is_subject))| {
                let row = [
                    g[[i, 0]].to_f64(),
                    g[[i, 1]].to_f64(),
                    g[[i, 2]].to_f64(),
                    g[[i, 3]].to_f64(),
                ];
                ObjectSpec { phrase: phrase.clone(), is_subject: *is_subject, bbox: clamp_geometry(&row) }
            })
            .collect();
        let layout = Layout { caption: caption.to_string(), objects: specs };
        layout.validate()?;
        out.push(layout);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::SyntheticGrammar;
    use ndarray::arr2;

    fn tiny_config() -> LayoutModelConfig {
        LayoutModelConfig {
            width: 64,
            blocks: 2,
            heads: 4,
            ff_hidden: 128,
            fourier_freqs: 4,
            feature_dim: 32,
            t_max: 20,
            ..LayoutModelConfig::default()
        }
    }

    fn prompt(n: usize, subject: usize) -> Vec<(String, bool)> {
        (0..n).map(|i| (format!("thing{i}"), i == subject)).collect()
    }

    fn gray(h: usize, w: usize) -> Image {
        crate::imageio::solid(h, w, [0.4, 0.5, 0.6])
    }

    #[test]
    fn output_shape_follows_object_count() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 1).unwrap();
        for n in [1usize, 3, 8] {
            let scene = m.encode_prompt(&gray(8, 6), &prompt(n, 0), "a scene").unwrap();
            let g = Array2::<f32>::zeros((n, 4));
            let eps = m.predict_eps(&[(&scene, &g, 5)]).unwrap();
            assert_eq!(eps.dim(), (1, n, 4));
        }
    }

    #[test]
    fn subject_slot_uses_visual_embedding_not_null() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 1).unwrap();
        let scene = m.encode_prompt(&gray(8, 6), &prompt(1, 0), "solo").unwrap();
        let g = Array2::<f32>::zeros((1, 4));
        let inputs = m.build_inputs(&[(&scene, &g, 3usize)]).unwrap();
        assert_eq!(inputs.null_sel[[0, 0, 0]], 0.0, "subject slot skips the null vector");
        let vis_norm: f32 = inputs.vis_feat.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((vis_norm - 1.0).abs() < 1e-5, "subject visual embedding is unit norm");
    }

    #[test]
    fn subject_count_is_enforced() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 1).unwrap();
        let none: Vec<(String, bool)> = vec![("a".into(), false), ("b".into(), false)];
        assert!(matches!(
            m.encode_prompt(&gray(4, 4), &none, "x"),
            Err(Error::SubjectCount(0))
        ));
        let two: Vec<(String, bool)> = vec![("a".into(), true), ("b".into(), true)];
        assert!(matches!(m.encode_prompt(&gray(4, 4), &two, "x"), Err(Error::SubjectCount(2))));
        assert!(m.encode_prompt(&gray(4, 4), &[], "x").is_err());
    }

    #[test]
    fn denoiser_is_permutation_equivariant() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 3).unwrap();
        let perm = [2usize, 0, 4, 1, 3];
        let objects = prompt(5, 1);
        let permuted: Vec<(String, bool)> = perm.iter().map(|&i| objects[i].clone()).collect();
        let g = arr2(&[
            [0.1f32, -0.3, 0.5, 0.2],
            [-0.6, 0.4, -0.1, 0.9],
            [0.0, 0.2, -0.8, 0.3],
            [0.7, -0.5, 0.2, -0.2],
            [-0.2, 0.8, 0.6, -0.7],
        ]);
        let g_perm = {
            let mut p = Array2::<f32>::zeros((5, 4));
            for (row, &src) in perm.iter().enumerate() {
                p.row_mut(row).assign(&g.row(src));
            }
            p
        };
        let img = gray(10, 7);
        let scene = m.encode_prompt(&img, &objects, "five things").unwrap();
        let scene_p = m.encode_prompt(&img, &permuted, "five things").unwrap();
        let out = m.predict_eps(&[(&scene, &g, 7)]).unwrap();
        let out_p = m.predict_eps(&[(&scene_p, &g_perm, 7)]).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                let a = out_p[[0, row, j]];
                let b = out[[0, src, j]];
                assert!((a - b).abs() <= 1e-5, "slot {row} coord {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn caption_conditioning_reaches_the_output() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 5).unwrap();
        let g = Array2::<f32>::zeros((3, 4));
        let img = gray(6, 6);
        let a = m.encode_prompt(&img, &prompt(3, 0), "a dog in the middle").unwrap();
        let b = m.encode_prompt(&img, &prompt(3, 0), "a house on the right").unwrap();
        let ea = m.predict_eps(&[(&a, &g, 4)]).unwrap();
        let eb = m.predict_eps(&[(&b, &g, 4)]).unwrap();
        let max_diff = ea
            .iter()
            .zip(eb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-7, "caption change must move the prediction");
    }

    #[test]
    fn null_vector_receives_gradient() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 7).unwrap();
        let scene = m.encode_prompt(&gray(5, 5), &prompt(4, 2), "things").unwrap();
        let g = Array2::<f32>::from_elem((4, 4), 0.25);
        let batch = vec![(&scene, &g, 6usize)];
        let inputs = m.build_inputs(&batch).unwrap();
        let mut tape = Tape::new();
        let (out, bound) = m.forward(&mut tape, &inputs);
        let sq = tape.mul(out, out);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let by_name = collect_grads(&bound, &grads);
        let null_grad = by_name.get("null_vis").expect("null vector is trainable");
        let norm: f32 = null_grad.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(norm > 0.0, "null vector gradient is zero on a batch with non-subjects");
    }

    #[test]
    fn training_overfits_one_sample() {
        let sample = SyntheticGrammar::default().generate(21, 0).unwrap();
        let tc = LayoutTrainConfig { steps: 600, batch_size: 2, lr: 2e-3, seed: 9 };
        let (_, log) = train_layout_model::<f32>(&[sample], &tiny_config(), &tc).unwrap();
        let early = log.mean_range(5, 15);
        let late = log.mean_range(580, 600);
        assert!(
            late < early * 0.5,
            "loss should halve when overfitting one sample: early {early}, late {late}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let samples = SyntheticGrammar::default().generate_batch(22, 0, 4).unwrap();
        let tc = LayoutTrainConfig { steps: 25, batch_size: 2, lr: 1e-3, seed: 4 };
        let (_, log_a) = train_layout_model::<f32>(&samples, &tiny_config(), &tc).unwrap();
        let (_, log_b) = train_layout_model::<f32>(&samples, &tiny_config(), &tc).unwrap();
        assert_eq!(log_a.losses, log_b.losses);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let tc = LayoutTrainConfig::default();
        assert!(matches!(
            train_layout_model::<f32>(&[], &tiny_config(), &tc),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn sampling_yields_k_valid_deterministic_layouts() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 11).unwrap();
        let objects = prompt(3, 1);
        let img = gray(9, 5);
        let layouts = sample_layouts(&m, &img, &objects, "three things", 5, 77).unwrap();
        assert_eq!(layouts.len(), 5);
        for l in &layouts {
            assert_eq!(l.objects.len(), 3);
            l.validate().unwrap();
            for (o, (phrase, is_subject)) in l.objects.iter().zip(&objects) {
                assert_eq!(&o.phrase, phrase);
                assert_eq!(&o.is_subject, is_subject);
                let (x0, y0, x1, y1) = o.bbox.corners();
                assert!(x0 >= -1e-6 && y0 >= -1e-6 && x1 <= 1.0 + 1e-6 && y1 <= 1.0 + 1e-6);
            }
        }
        let again = sample_layouts(&m, &img, &objects, "three things", 5, 77).unwrap();
        assert_eq!(layouts, again);
        let other = sample_layouts(&m, &img, &objects, "three things", 1, 78).unwrap();
        assert_ne!(layouts[0], other[0], "different seed, different chain");
    }

    #[test]
    fn clamped_geometry_always_satisfies_box_invariants() {
        let mut rows = vec![
            [-3.0, 4.0, 9.0, -9.0],
            [0.0, 0.0, 0.0, 0.0],
            [1.0, -1.0, -0.5, 0.5],
            [0.99, 0.99, 0.99, 0.99],
            [1.0, 1.0, -1.0, -1.0], // collapses onto the bottom-right corner
        ];
        let mut rng = derive_rng(5, Stream::Sample, &[99]);
        for _ in 0..200 {
            let r = randn::<f64>(&[4], &mut rng);
            rows.push([3.0 * r[[0]], 3.0 * r[[1]], 3.0 * r[[2]], 3.0 * r[[3]]]);
        }
        for row in rows {
            let b = clamp_geometry(&row);
            b.validate().unwrap();
            // Any clamped box must survive pasting on the smallest canvas.
            let (_, _, pw, ph) = b.pixel_rect(16, 16);
            assert!(pw >= 1 && ph >= 1, "{row:?} -> {b:?} rounds to {pw}x{ph} px");
        }
    }

    #[test]
    fn store_round_trip_preserves_behavior() {
        let m = LayoutDenoiser::<f32>::new(tiny_config(), 13).unwrap();
        let scene = m.encode_prompt(&gray(6, 4), &prompt(2, 0), "pair").unwrap();
        let g = Array2::<f32>::from_elem((2, 4), -0.1);
        let a = m.predict_eps(&[(&scene, &g, 2)]).unwrap();
        let rebuilt = LayoutDenoiser::from_store(tiny_config(), m.store.clone()).unwrap();
        let b = rebuilt.predict_eps(&[(&scene, &g, 2)]).unwrap();
        assert_eq!(a, b);
        let mut wrong = ParamStore::<f32>::new();
        wrong.insert("null_vis", ArrayD::zeros(IxDyn(&[32])), false);
        assert!(LayoutDenoiser::from_store(tiny_config(), wrong).is_err());
    }
}
