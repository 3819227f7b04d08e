use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorops::{ConvCfg, DualTensor, Graph, Tensor4, Var};

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<DualTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor4<T>) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(DualTensor::new(value));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &DualTensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut DualTensor<T> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DualTensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DualTensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DualTensor::zero_grad);
    }

    /// Record every value on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.value.clone(), trainable))
            .collect()
    }

    /// Replace values by name; names and shapes must match exactly.
    pub fn load(&mut self, named: Vec<(String, Tensor4<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors supplied for {} parameters",
                named.len(),
                self.len()
            )));
        }
        for (name, t) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[i].value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: {:?} vs {:?}",
                    t.shape(),
                    self.tensors[i].value.shape()
                )));
            }
            self.tensors[i] = DualTensor::new(t);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Followed by a rectifying nonlinearity.
    Gelu,
    Linear,
    Zero,
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    cfg: ConvCfg,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: ConvCfg,
        init: Init,
    ) -> Self {
        let groups = cfg.groups;
        let fan_in = cin / groups * k * k;
        let bound = match init {
            Init::Gelu => (6.0 / fan_in as f64).sqrt(),
            Init::Linear => (3.0 / fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let kernel = Tensor4::from_fn([cout, cin / groups, k, k], |_| {
            T::of(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
        });
        let w = store.push(format!("{name}.weight"), kernel);
        let b = store.push(format!("{name}.bias"), Tensor4::zeros([1, cout, 1, 1]));
        Self { w, b, cfg }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, v[self.w], Some(v[self.b]), self.cfg)
    }
}

/// Stride-2 convolutional stack taking images to 1/8 resolution.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    layers: Vec<(Conv, bool)>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, dim: usize) -> Self {
        let c1 = (dim / 4).max(8);
        let c2 = (dim / 2).max(8);
        let spec: [(usize, usize, usize, usize, bool); 6] = [
            (cin, c1, 7, 2, true),
            (c1, c1, 3, 1, true),
            (c1, c2, 3, 2, true),
            (c2, c2, 3, 1, true),
            (c2, dim, 3, 2, true),
            (dim, dim, 1, 1, false),
        ];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s, act))| {
                let init = if act { Init::Gelu } else { Init::Linear };
                let conv = Conv::new(store, rng, &format!("{name}.conv{i}"), ci, co, k, ConvCfg::same(k).stride(s), init);
                (conv, act)
            })
            .collect();
        Self { layers }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var], mut x: Var) -> Result<Var> {
        for (conv, act) in &self.layers {
            x = conv.apply(g, v, x)?;
            if *act {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}

/// Depthwise 7x7, channel norm, 4x pointwise expansion, GELU, pointwise
/// projection onto the hidden width; the result is added to the hidden state.
#[derive(Clone, Debug)]
pub(crate) struct ConvNextBlock {
    dw: Conv,
    gamma: usize,
    beta: usize,
    expand: Conv,
    project: Conv,
}

impl ConvNextBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, hidden: usize) -> Self {
        let dw = Conv::new(store, rng, &format!("{name}.dw"), cin, cin, 7, ConvCfg::same(7).groups(cin), Init::Linear);
        let gamma = store.push(format!("{name}.norm.gamma"), Tensor4::full([1, cin, 1, 1], T::one()));
        let beta = store.push(format!("{name}.norm.beta"), Tensor4::zeros([1, cin, 1, 1]));
        let expand = Conv::new(store, rng, &format!("{name}.pw1"), cin, 4 * hidden, 1, ConvCfg::default(), Init::Gelu);
        let project = Conv::new(store, rng, &format!("{name}.pw2"), 4 * hidden, hidden, 1, ConvCfg::default(), Init::Linear);
        Self {
            dw,
            gamma,
            beta,
            expand,
            project,
        }
    }

    /// Residual update of `h` from the block input `x`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var], h: Var, x: Var) -> Result<Var> {
        let y = self.dw.apply(g, v, x)?;
        let y = g.channel_norm(y, v[self.gamma], v[self.beta])?;
        let y = self.expand.apply(g, v, y)?;
        let y = g.gelu(y);
        let y = self.project.apply(g, v, y)?;
        g.add(h, y)
    }
}

/// Maps raw lookup values and the current flow to motion features; the
/// flow itself is appended as the last two channels.
#[derive(Clone, Debug)]
pub(crate) struct MotionEncoder {
    corr: Conv,
    flow: Conv,
    merge: Conv,
}

impl MotionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, corr_channels: usize, dim: usize) -> Self {
        let (dc, df) = (dim / 2, dim / 4);
        Self {
            corr: Conv::new(store, rng, "motion.corr", corr_channels, dc, 1, ConvCfg::default(), Init::Gelu),
            flow: Conv::new(store, rng, "motion.flow", 2, df, 7, ConvCfg::same(7), Init::Gelu),
            merge: Conv::new(store, rng, "motion.merge", dc + df, dim - 2, 3, ConvCfg::same(3), Init::Gelu),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var], corr: Var, flow: Var) -> Result<Var> {
        let c = self.corr.apply(g, v, corr)?;
        let c = g.gelu(c);
        let f = self.flow.apply(g, v, flow)?;
        let f = g.gelu(f);
        let m = g.concat(&[c, f])?;
        let m = self.merge.apply(g, v, m)?;
        let m = g.gelu(m);
        g.concat(&[m, flow])
    }
}

/// Two convolutions with a GELU between them.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    first: Conv,
    second: Conv,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        k2: usize,
    ) -> Self {
        Self {
            first: Conv::new(store, rng, &format!("{name}.conv0"), cin, mid, 3, ConvCfg::same(3), Init::Gelu),
            second: Conv::new(store, rng, &format!("{name}.conv1"), mid, cout, k2, ConvCfg::same(k2), Init::Zero),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var], x: Var) -> Result<Var> {
        let y = self.first.apply(g, v, x)?;
        let y = g.gelu(y);
        self.second.apply(g, v, y)
    }
}
