//! Recurrent flow network: shared feature encoder, stacked-frame context
//! encoder with direct initial-flow regression, ConvNeXt-block refinement,
//! flow and mask heads, and convex upsampling.
//!
//! Images enter as `[n, 3, H, W]` tensors in `[0, 1]`; `H` and `W` must be
//! multiples of 8. Every prediction is returned at full resolution.

mod archive;
mod layers;
mod upsample;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corr::{build_pyramid, lookup, CorrPyramid, LookupConfig};
use crate::error::{shape_err, Error, Result};
use crate::flow::{FlowField, MoLParams};
use crate::flowio::Image;
use crate::loss::{prediction_loss, sequence_loss_var, LossConfig, LossKind, Target};
use crate::scalar::Scalar;
use crate::tensorops::{resize_bilinear_forward, sigmoid, ConvCfg, Graph, Tensor4, Var};

pub use archive::{decode as decode_archive, encode as encode_archive, load as load_archive, save as save_archive};
pub use layers::ParamStore;
pub use upsample::convex_upsample;

use layers::{Conv, ConvNextBlock, Encoder, Head, Init, MotionEncoder};

/// Spatial reduction between images and feature maps.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub context_dim: usize,
    pub motion_dim: usize,
    /// Refinement iterations during training.
    pub iterations: usize,
    /// Upper bound on refinement iterations at inference.
    pub inference_iterations: usize,
    pub levels: usize,
    pub radius: usize,
    pub downsample: usize,
    pub rnn_blocks: usize,
    /// Regress the initial flow from the context encoder; otherwise start
    /// from zero flow with a frame-1-only context.
    pub direct_regression: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden_dim: 64,
            context_dim: 64,
            motion_dim: 128,
            iterations: 4,
            inference_iterations: 12,
            levels: 4,
            radius: 4,
            downsample: DOWNSAMPLE,
            rnn_blocks: 2,
            direct_regression: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.{m}")));
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("context_dim", self.context_dim),
            ("levels", self.levels),
            ("rnn_blocks", self.rnn_blocks),
            ("inference_iterations", self.inference_iterations),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.motion_dim < 8 {
            return bad("motion_dim must be at least 8".into());
        }
        if self.downsample != DOWNSAMPLE {
            return bad(format!("downsample is fixed at {DOWNSAMPLE}"));
        }
        if self.iterations > self.inference_iterations {
            return bad("iterations must not exceed inference_iterations".into());
        }
        Ok(())
    }

    pub fn lookup(&self) -> LookupConfig {
        LookupConfig {
            radius: self.radius,
            levels: self.levels,
        }
    }
}

/// Per-iteration state of the refinement loop, at 1/8 resolution.
#[derive(Clone, Copy, Debug)]
pub struct RefineState {
    pub hidden: Var,
    pub context: Var,
    /// `[n, 2, h, w]` in 1/8-resolution pixels.
    pub flow: Var,
    /// Raw distribution channels regressed with the flow.
    pub info: Option<Var>,
    pub iteration: usize,
}

/// One full-resolution output of the network.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[n, 2, H, W]` in full-resolution pixels.
    pub flow: Var,
    /// `[n, k, H, W]` raw distribution channels, `k = kind.info_channels()`.
    pub info: Option<Var>,
}

/// Host-side copy of one prediction for batch item 0.
#[derive(Clone, Debug)]
pub struct FlowOutput<T> {
    pub flow: FlowField<T>,
    pub mol: Option<MoLParams<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub parameters: usize,
    pub tensors: usize,
    /// Multiply-accumulates for encoders, pyramid and the initial prediction.
    pub setup_macs: u64,
    /// Multiply-accumulates of one refinement iteration including upsampling.
    pub iteration_macs: u64,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    kind: LossKind,
    params: ParamStore<T>,
    fnet: Encoder,
    cnet: Encoder,
    hidden_head: Conv,
    motion: MotionEncoder,
    blocks: Vec<ConvNextBlock>,
    flow_head: Head,
    mask_head: Head,
    detach_flow: bool,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights drawn from `seed`; final flow and mask layers start at 0.
    pub fn new(config: &ModelConfig, kind: LossKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = config;
        let ctx_in = if c.direct_regression { 6 } else { 3 };
        let fnet = Encoder::new(&mut p, &mut rng, "fnet", 3, c.feature_dim);
        let cnet = Encoder::new(&mut p, &mut rng, "cnet", ctx_in, c.context_dim);
        let hidden_head = Conv::new(&mut p, &mut rng, "hidden_head", c.context_dim, c.hidden_dim, 1, ConvCfg::default(), Init::Linear);
        let motion = MotionEncoder::new(&mut p, &mut rng, c.lookup().channels(), c.motion_dim);
        let block_in = c.hidden_dim + c.motion_dim + c.context_dim;
        let blocks = (0..c.rnn_blocks)
            .map(|i| ConvNextBlock::new(&mut p, &mut rng, &format!("rnn.block{i}"), block_in, c.hidden_dim))
            .collect();
        let f2 = DOWNSAMPLE * DOWNSAMPLE;
        let flow_head = Head::new(&mut p, &mut rng, "flow_head", c.hidden_dim, c.hidden_dim, 2 + kind.info_channels(), 3);
        let mask_head = Head::new(&mut p, &mut rng, "mask_head", c.hidden_dim, 2 * c.hidden_dim, 9 * f2, 1);
        Ok(Self {
            config: config.clone(),
            kind,
            params: p,
            fnet,
            cnet,
            hidden_head,
            motion,
            blocks,
            flow_head,
            mask_head,
            detach_flow: true,
        })
    }

    /// Whether each refinement adds its residual to a gradient-stopped copy
    /// of the incoming flow (the default). Disabling the stop makes the
    /// network an ordinary differentiable function, which finite-difference
    /// verification requires; training always keeps it on.
    pub fn set_detach_flow(&mut self, on: bool) {
        self.detach_flow = on;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Shared feature encoder: `[n, 3, H, W]` to `[n, D, H/8, W/8]`.
    pub fn encode_features(&self, g: &mut Graph<T>, v: &[Var], image: Var) -> Result<Var> {
        check_image(g.shape(image))?;
        let x = g.affine(image, T::of(2.0), T::of(-1.0));
        self.fnet.apply(g, v, x)
    }

    /// Context feature, initial hidden state and the directly regressed
    /// initial flow (zero when direct regression is disabled).
    pub fn encode_context(&self, g: &mut Graph<T>, v: &[Var], i1: Var, i2: Var) -> Result<RefineState> {
        let (s1, s2) = (g.shape(i1), g.shape(i2));
        check_image(s1)?;
        if s1 != s2 {
            return Err(shape_err!("frames differ in shape: {:?} vs {:?}", s1, s2));
        }
        let x1 = g.affine(i1, T::of(2.0), T::of(-1.0));
        let input = if self.config.direct_regression {
            let x2 = g.affine(i2, T::of(2.0), T::of(-1.0));
            g.concat(&[x1, x2])?
        } else {
            x1
        };
        let context = self.cnet.apply(g, v, input)?;
        let h = self.hidden_head.apply(g, v, context)?;
        let hidden = g.tanh(h);
        let [n, _, hh, ww] = g.shape(context);
        let (flow, info) = if self.config.direct_regression {
            let d = self.flow_head.apply(g, v, hidden)?;
            self.split_head(g, d)?
        } else {
            (g.constant(Tensor4::zeros([n, 2, hh, ww])), None)
        };
        Ok(RefineState {
            hidden,
            context,
            flow,
            info,
            iteration: 0,
        })
    }

    fn split_head(&self, g: &mut Graph<T>, d: Var) -> Result<(Var, Option<Var>)> {
        let flow = g.slice_channels(d, 0, 2)?;
        let k = self.kind.info_channels();
        let info = if k > 0 { Some(g.slice_channels(d, 2, k)?) } else { None };
        Ok((flow, info))
    }

    /// Lookup, motion encoding, recurrent update and a new flow estimate
    /// `stop_gradient(flow) + delta`.
    pub fn refine_step(&self, g: &mut Graph<T>, v: &[Var], state: &RefineState, pyr: &CorrPyramid) -> Result<RefineState> {
        if state.iteration >= self.config.inference_iterations {
            return Err(Error::LoopOverrun {
                iteration: state.iteration,
                limit: self.config.inference_iterations,
            });
        }
        let corr = lookup(g, pyr, state.flow, self.config.lookup())?;
        let motion = self.motion.apply(g, v, corr, state.flow)?;
        let mut hidden = state.hidden;
        for block in &self.blocks {
            let x = g.concat(&[hidden, motion, state.context])?;
            hidden = block.apply(g, v, hidden, x)?;
        }
        let d = self.flow_head.apply(g, v, hidden)?;
        let (delta, info) = self.split_head(g, d)?;
        let base = if self.detach_flow { g.stop_gradient(state.flow) } else { state.flow };
        let flow = g.add(base, delta)?;
        Ok(RefineState {
            hidden,
            context: state.context,
            flow,
            info,
            iteration: state.iteration + 1,
        })
    }

    /// Convex upsampling of the state's flow (scaled by 8) and raw info
    /// channels, with mask logits regressed from the hidden state.
    pub fn upsample(&self, g: &mut Graph<T>, v: &[Var], state: &RefineState) -> Result<Prediction> {
        let m = self.mask_head.apply(g, v, state.hidden)?;
        let m = g.scale(m, T::of(0.25));
        let weights = g.softmax_channels(m, 9)?;
        let scaled = g.scale(state.flow, T::of(DOWNSAMPLE as f64));
        let flow = convex_upsample(g, scaled, weights, DOWNSAMPLE)?;
        let info = match state.info {
            Some(i) => Some(convex_upsample(g, i, weights, DOWNSAMPLE)?),
            None => None,
        };
        Ok(Prediction { flow, info })
    }

    /// `n_iters + 1` predictions; element 0 is the initial estimate.
    pub fn forward(&self, g: &mut Graph<T>, v: &[Var], i1: Var, i2: Var, n_iters: usize) -> Result<Vec<Prediction>> {
        if n_iters > self.config.inference_iterations {
            return Err(Error::LoopOverrun {
                iteration: n_iters,
                limit: self.config.inference_iterations,
            });
        }
        let (mut state, pyr) = self.setup(g, v, i1, i2)?;
        let mut out = Vec::with_capacity(n_iters + 1);
        out.push(self.initial_prediction(g, v, &state, g.shape(i1))?);
        for _ in 0..n_iters {
            state = self.refine_step(g, v, &state, &pyr)?;
            out.push(self.upsample(g, v, &state)?);
        }
        Ok(out)
    }

    fn setup(&self, g: &mut Graph<T>, v: &[Var], i1: Var, i2: Var) -> Result<(RefineState, CorrPyramid)> {
        let state = self.encode_context(g, v, i1, i2)?;
        let f1 = self.encode_features(g, v, i1)?;
        let f2 = self.encode_features(g, v, i2)?;
        let pyr = build_pyramid(g, f1, f2, self.config.levels)?;
        Ok((state, pyr))
    }

    fn initial_prediction(&self, g: &mut Graph<T>, v: &[Var], state: &RefineState, shape: [usize; 4]) -> Result<Prediction> {
        if self.config.direct_regression {
            self.upsample(g, v, state)
        } else {
            let [n, _, h, w] = shape;
            Ok(Prediction {
                flow: g.constant(Tensor4::zeros([n, 2, h, w])),
                info: None,
            })
        }
    }

    /// Loss of every prediction that carries signal; the constant zero
    /// prediction of a model without direct regression is skipped.
    pub fn prediction_losses(&self, g: &mut Graph<T>, preds: &[Prediction], target: &Target<T>, cfg: &LossConfig) -> Result<Vec<Var>> {
        let skip = usize::from(!self.config.direct_regression);
        preds
            .iter()
            .skip(skip)
            .map(|p| prediction_loss(g, self.kind, cfg.beta_upper, p.flow, p.info, target))
            .collect()
    }

    /// Exponentially weighted sum of [`Model::prediction_losses`].
    pub fn sequence_loss(&self, g: &mut Graph<T>, preds: &[Prediction], target: &Target<T>, cfg: &LossConfig) -> Result<Var> {
        let losses = self.prediction_losses(g, preds, target, cfg)?;
        sequence_loss_var(g, &losses, cfg.gamma)
    }

    /// Inference on one image pair; returns every prediction for batch item 0.
    pub fn infer(&self, i1: &Image, i2: &Image, n_iters: usize) -> Result<Vec<FlowOutput<T>>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let a = g.constant(i1.to_tensor());
        let b = g.constant(i2.to_tensor());
        let preds = self.forward(&mut g, &v, a, b, n_iters)?;
        preds.iter().map(|p| self.output(&g, p)).collect()
    }

    /// Inference on frames of any size: optional downsampling by
    /// `downsample`, replicate padding to multiples of 8, cropping, and
    /// bilinear upsampling of the flow back to the input extents with
    /// vectors rescaled accordingly. Returns the final prediction.
    pub fn infer_frames(&self, i1: &Image, i2: &Image, n_iters: usize, downsample: usize) -> Result<FlowOutput<T>> {
        let (h, w) = (i1.height(), i1.width());
        if (h, w) != (i2.height(), i2.width()) {
            return Err(shape_err!("frames differ in size: {}x{} vs {}x{}", h, w, i2.height(), i2.width()));
        }
        if downsample == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("cannot infer {h}x{w} frames at 1/{downsample} scale")));
        }
        let (hs, ws) = (h.div_ceil(downsample), w.div_ceil(downsample));
        let scale = |img: &Image| if downsample == 1 { img.clone() } else { img.resize(hs, ws) };
        let (a, b) = (scale(i1), scale(i2));
        let (hp, wp) = (hs.next_multiple_of(DOWNSAMPLE), ws.next_multiple_of(DOWNSAMPLE));
        let (a, b) = (a.pad_replicate(hp, wp), b.pad_replicate(hp, wp));
        let out = self.infer(&a, &b, n_iters)?.pop().expect("at least one prediction");
        let mut flow = out.flow.crop(hs, ws);
        if downsample != 1 {
            flow = flow.resize(h, w);
        }
        let mol = out.mol.map(|m| MoLParams {
            alpha: crop_plane(&m.alpha, hs, ws, h, w),
            beta2: crop_plane(&m.beta2, hs, ws, h, w),
        });
        Ok(FlowOutput { flow, mol })
    }

    /// Copy batch item 0 of a prediction off the graph.
    pub fn output(&self, g: &Graph<T>, p: &Prediction) -> Result<FlowOutput<T>> {
        let flow = FlowField::from_tensor(g.value(p.flow).batch_item(0))?;
        let mol = self.output_batch(g, p)?.map(|mut m| m.swap_remove(0));
        Ok(FlowOutput { flow, mol })
    }

    /// Mixture parameters of every batch item, for mixture losses only.
    pub fn output_batch(&self, g: &Graph<T>, p: &Prediction) -> Result<Option<Vec<MoLParams<T>>>> {
        let info = match (self.kind, p.info) {
            (LossKind::Mol | LossKind::Mog, Some(info)) => g.value(info),
            _ => return Ok(None),
        };
        let [n, _, h, w] = info.shape();
        let up = T::of(LossConfig::default().beta_upper);
        let plane = h * w;
        (0..n)
            .map(|b| {
                let t = info.batch_item(b);
                Ok(MoLParams {
                    alpha: Tensor4::from_vec([1, 1, h, w], t.data()[..plane].iter().map(|&x| sigmoid(x)).collect())?,
                    beta2: Tensor4::from_vec(
                        [1, 1, h, w],
                        t.data()[plane..2 * plane].iter().map(|&x| x.max(T::zero()).min(up)).collect(),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Parameter count and multiply-accumulate cost for an `height x width` pair.
    pub fn summary(&self, height: usize, width: usize) -> Result<ModelSummary> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let a = g.constant(Tensor4::zeros([1, 3, height, width]));
        let b = g.constant(Tensor4::zeros([1, 3, height, width]));
        let (state, pyr) = self.setup(&mut g, &v, a, b)?;
        self.initial_prediction(&mut g, &v, &state, [1, 3, height, width])?;
        let setup_macs = g.macs();
        let next = self.refine_step(&mut g, &v, &state, &pyr)?;
        self.upsample(&mut g, &v, &next)?;
        Ok(ModelSummary {
            parameters: self.params.count(),
            tensors: self.params.len(),
            setup_macs,
            iteration_macs: g.macs() - setup_macs,
            height,
            width,
        })
    }

    pub fn named_weights(&self) -> Vec<(String, &Tensor4<T>)> {
        self.params.iter().map(|(n, t)| (n.to_string(), &t.value)).collect()
    }

    /// Replace every weight from an archive; returns its metadata.
    pub fn load_weights(&mut self, path: &Path) -> Result<serde_json::Value> {
        let (meta, named) = archive::load(path)?;
        self.params.load(named)?;
        Ok(meta)
    }

    pub fn save_weights(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        archive::save(path, &self.named_weights(), meta)
    }
}

/// Top-left `hs x ws` window of a single-channel plane, resized to `h x w`.
fn crop_plane<T: Scalar>(t: &Tensor4<T>, hs: usize, ws: usize, h: usize, w: usize) -> Tensor4<T> {
    let c = Tensor4::from_fn([1, 1, hs, ws], |[_, _, y, x]| t.at(0, 0, y, x));
    if (hs, ws) == (h, w) {
        c
    } else {
        resize_bilinear_forward(&c, h, w)
    }
}

fn check_image(shape: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = shape;
    if c != 3 || h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(shape_err!(
            "images must be [n, 3, H, W] with H, W positive multiples of {DOWNSAMPLE}, got {:?}",
            shape
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
