//! Learned blocks: the 2D feature U-Net, the pixelwise and voxelwise
//! attention nets, and the 3D regularization U-Net.
//!
//! Every block only stores [`ParamId`]s; values live in one [`ParamStore`]
//! owned by [`Model`], so the same layout can be instantiated in `f32` for
//! production and `f64` for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sweepfuse_tensor::{ConvSpec, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Channels of the feature maps and of every cost volume.
pub const FEATURE_CHANNELS: usize = 32;

/// Bias of the last attention layer in [`Model::zero_attention`]:
/// `sigmoid(−40) ≈ 4e-18`, so `1 + w` rounds to exactly 1 in both precisions.
pub const ZEROED_ATTENTION_BIAS: f64 = -40.0;

#[derive(Clone, Copy, Debug)]
enum Init {
    HeUniform,
    Zero,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn tensor(&mut self, shape: Vec<usize>, fan_in: usize, init: Init) -> Tensor<T> {
        match init {
            Init::Zero => Tensor::zeros(shape),
            Init::HeUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            }
        }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> Result<ParamId> {
        Ok(self.store.add(name, value)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Result<Conv> {
        let k = 3;
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(k, dims));
        let fan_in = cin * k.pow(dims as u32);
        let w = self.tensor(shape, fan_in, init);
        let weight = self.add(format!("{name}.weight"), w)?;
        let bias = if bias { Some(self.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?) } else { None };
        Ok(Conv { weight, bias, spec: ConvSpec::same(dims, k, stride) })
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.add(format!("{name}.gn.gamma"), Tensor::full(vec![channels], T::one()))?,
            beta: self.add(format!("{name}.gn.beta"), Tensor::zeros(vec![channels]))?,
            groups,
        })
    }

    /// Convolution without bias followed by group norm and relu.
    fn conv_gr(
        &mut self,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
    ) -> Result<ConvGr> {
        Ok(ConvGr {
            conv: self.conv(name, dims, cin, cout, stride, false, Init::HeUniform)?,
            norm: self.norm(name, cout, groups)?,
        })
    }

    /// Stride-2 transposed convolution (weight `[C_in, C_out, 3, ...]`)
    /// followed by group norm and relu.
    fn up_gr(&mut self, name: &str, dims: usize, cin: usize, cout: usize, groups: usize) -> Result<UpGr> {
        let mut shape = vec![cin, cout];
        shape.extend(std::iter::repeat_n(3, dims));
        let w = self.tensor(shape, cin * 3usize.pow(dims as u32), Init::HeUniform);
        Ok(UpGr {
            weight: self.add(format!("{name}.weight"), w)?,
            spec: ConvSpec::same(dims, 3, 2),
            norm: self.norm(name, cout, groups)?,
        })
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        Ok(tape.conv(x, w, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.group_norm(x, g, b, self.groups)?)
    }
}

#[derive(Clone, Debug)]
struct ConvGr {
    conv: Conv,
    norm: Norm,
}

impl ConvGr {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct UpGr {
    weight: ParamId,
    spec: ConvSpec,
    norm: Norm,
}

impl UpGr {
    /// Upsamples to exactly the extents of `skip` and adds it.
    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, skip: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let target = tape.shape(skip)[1..].to_vec();
        let y = tape.conv_transpose_to(x, w, None, self.spec, &target)?;
        let y = self.norm.forward(tape, store, y)?;
        let y = tape.relu(y);
        Ok(tape.add(y, skip)?)
    }
}

fn check_divisible(what: &str, extents: &[usize], by: usize) -> Result<()> {
    if extents.iter().any(|&e| e == 0 || e % by != 0) {
        return Err(Error::config(format!("{what} extents {extents:?} must be positive multiples of {by}")));
    }
    Ok(())
}

/// 2D encoder-decoder: three stride-2 stages (8, 16, 32 channels), one
/// transposed-conv stage back to quarter resolution with an additive skip,
/// and a plain 32-channel output conv.
#[derive(Clone, Debug)]
pub struct FeatureNet2D {
    conv0: ConvGr,
    conv1: ConvGr,
    conv2: ConvGr,
    conv3: ConvGr,
    up3: UpGr,
    out: Conv,
}

impl FeatureNet2D {
    /// `[3, H, W]` with `H`, `W` divisible by 8 → `[32, H/4, W/4]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::config(format!("feature input must be [3, H, W], got {s:?}")));
        }
        check_divisible("image", &s[1..], 8)?;
        let x = self.conv0.forward(tape, store, image)?;
        let x = self.conv1.forward(tape, store, x)?;
        let skip = self.conv2.forward(tape, store, x)?;
        let x = self.conv3.forward(tape, store, skip)?;
        let x = self.up3.forward(tape, store, x, skip)?;
        self.out.forward(tape, store, x)
    }
}

/// Pixelwise attention: ConvGR(2→16), ResBlockGR(16), Conv(16→1), sigmoid.
#[derive(Clone, Debug)]
pub struct PANet {
    conv0: ConvGr,
    res_a: ConvGr,
    res_b: ConvGr,
    out: Conv,
}

impl PANet {
    /// `[2, H, W]` → `[1, H, W]` with entries in (0, 1).
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let s = tape.shape(f);
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::config(format!("pixelwise attention input must be [2, H, W], got {s:?}")));
        }
        let x = self.conv0.forward(tape, store, f)?;
        let r = self.res_a.forward(tape, store, x)?;
        let r = self.res_b.forward(tape, store, r)?;
        let x = tape.add(r, x)?;
        let y = self.out.forward(tape, store, x)?;
        Ok(tape.sigmoid(y))
    }
}

/// Voxelwise attention: Conv3DGR(32→1), Conv3D(1→1), sigmoid.
#[derive(Clone, Debug)]
pub struct VANet {
    conv0: ConvGr,
    out: Conv,
}

impl VANet {
    /// `[32, D, H, W]` → `[1, D, H, W]` with entries in (0, 1).
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, v: Var) -> Result<Var> {
        let s = tape.shape(v);
        if s.len() != 4 || s[0] != FEATURE_CHANNELS {
            return Err(Error::config(format!(
                "voxelwise attention input must be [{FEATURE_CHANNELS}, D, H, W], got {s:?}"
            )));
        }
        let x = self.conv0.forward(tape, store, v)?;
        let y = self.out.forward(tape, store, x)?;
        Ok(tape.sigmoid(y))
    }
}

/// 3-level 3D U-Net (8/16/32 channels at scales 1, 1/2, 1/4) with additive
/// skips and a final 1-channel conv producing logits.
#[derive(Clone, Debug)]
pub struct RegNet3D {
    c0: ConvGr,
    c1: ConvGr,
    c2: ConvGr,
    c3: ConvGr,
    c4: ConvGr,
    up1: UpGr,
    up0: UpGr,
    out: Conv,
}

impl RegNet3D {
    /// `[32, D, H, W]` with `D`, `H`, `W` divisible by 8 → logits `[D, H, W]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cost: Var) -> Result<Var> {
        let s = tape.shape(cost).to_vec();
        if s.len() != 4 || s[0] != FEATURE_CHANNELS {
            return Err(Error::config(format!(
                "regularization input must be [{FEATURE_CHANNELS}, D, H, W], got {s:?}"
            )));
        }
        check_divisible("cost volume", &s[1..], 8)?;
        let x0 = self.c0.forward(tape, store, cost)?;
        let x1 = self.c1.forward(tape, store, x0)?;
        let x1 = self.c2.forward(tape, store, x1)?;
        let x2 = self.c3.forward(tape, store, x1)?;
        let x2 = self.c4.forward(tape, store, x2)?;
        let y1 = self.up1.forward(tape, store, x2, x1)?;
        let y0 = self.up0.forward(tape, store, y1, x0)?;
        let logits = self.out.forward(tape, store, y0)?;
        Ok(tape.reshape(logits, s[1..].to_vec())?)
    }
}

/// All learned blocks and their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub features: FeatureNet2D,
    pub panet: PANet,
    pub vanet: VANet,
    pub regnet: RegNet3D,
}

/// One row of the architecture summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

impl<T: Element> Model<T> {
    /// He-uniform convolution weights from a seeded ChaCha8 stream, unit
    /// group-norm scales, zero biases. The last attention and logit layers
    /// start at zero, giving uniform attention (w = 0.5) and a uniform
    /// probability volume.
    pub fn new(seed: u64) -> Result<Self> {
        Self::build(seed, Init::Zero)
    }

    /// Every layer He-uniform, including the last attention and logit
    /// layers. Used where zero gradients upstream of those layers would make
    /// a check vacuous.
    pub fn new_dense(seed: u64) -> Result<Self> {
        Self::build(seed, Init::HeUniform)
    }

    fn build(seed: u64, last: Init) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let c = FEATURE_CHANNELS;
        let features = FeatureNet2D {
            conv0: b.conv_gr("featnet.conv0", 2, 3, 8, 1, 2)?,
            conv1: b.conv_gr("featnet.conv1", 2, 8, 8, 2, 2)?,
            conv2: b.conv_gr("featnet.conv2", 2, 8, 16, 2, 4)?,
            conv3: b.conv_gr("featnet.conv3", 2, 16, 32, 2, 8)?,
            up3: b.up_gr("featnet.up3", 2, 32, 16, 4)?,
            out: b.conv("featnet.out", 2, 16, c, 1, true, Init::HeUniform)?,
        };
        let panet = PANet {
            conv0: b.conv_gr("panet.conv0", 2, 2, 16, 1, 4)?,
            res_a: b.conv_gr("panet.res.conv_a", 2, 16, 16, 1, 4)?,
            res_b: b.conv_gr("panet.res.conv_b", 2, 16, 16, 1, 4)?,
            out: b.conv("panet.out", 2, 16, 1, 1, true, last)?,
        };
        let vanet = VANet {
            conv0: b.conv_gr("vanet.conv0", 3, c, 1, 1, 1)?,
            out: b.conv("vanet.out", 3, 1, 1, 1, true, last)?,
        };
        let regnet = RegNet3D {
            c0: b.conv_gr("regnet.c0", 3, c, 8, 1, 2)?,
            c1: b.conv_gr("regnet.c1", 3, 8, 16, 2, 4)?,
            c2: b.conv_gr("regnet.c2", 3, 16, 16, 1, 4)?,
            c3: b.conv_gr("regnet.c3", 3, 16, 32, 2, 8)?,
            c4: b.conv_gr("regnet.c4", 3, 32, 32, 1, 8)?,
            up1: b.up_gr("regnet.up1", 3, 32, 16, 4)?,
            up0: b.up_gr("regnet.up0", 3, 16, 8, 2)?,
            out: b.conv("regnet.out", 3, 8, 1, 1, true, last)?,
        };
        Ok(Self { store, features, panet, vanet, regnet })
    }

    /// Forces both attention nets to output `w ≈ 0` (unit multipliers).
    pub fn zero_attention(&mut self) {
        for conv in [&self.panet.out, &self.vanet.out] {
            let w = &mut self.store.get_mut(conv.weight).value;
            *w = Tensor::zeros(w.shape().to_vec());
            if let Some(b) = conv.bias {
                let bias = &mut self.store.get_mut(b).value;
                *bias = Tensor::full(bias.shape().to_vec(), T::lit(ZEROED_ATTENTION_BIAS));
            }
        }
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            store: self.store.cast(),
            features: self.features.clone(),
            panet: self.panet.clone(),
            vanet: self.vanet.clone(),
            regnet: self.regnet.clone(),
        }
    }

    /// Same layout bound to another set of values.
    pub fn with_store(&self, store: &ParamStore<T>) -> Model<T> {
        Model {
            store: store.clone(),
            features: self.features.clone(),
            panet: self.panet.clone(),
            vanet: self.vanet.clone(),
            regnet: self.regnet.clone(),
        }
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.store
            .iter()
            .map(|p| SummaryRow { name: p.name.clone(), shape: p.value.shape().to_vec(), count: p.value.numel() })
            .collect()
    }

    pub fn extract_features(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        self.features.forward(tape, &self.store, image)
    }

    pub fn pa_weights(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        self.panet.forward(tape, &self.store, f)
    }

    pub fn va_weights(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        self.vanet.forward(tape, &self.store, v)
    }

    pub fn regularize(&self, tape: &mut Tape<T>, cost: Var) -> Result<Var> {
        self.regnet.forward(tape, &self.store, cost)
    }
}
