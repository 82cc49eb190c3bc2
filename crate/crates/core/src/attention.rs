//! Convolutional block attention: channel attention from a shared bottleneck
//! MLP over spatially pooled descriptors, then spatial attention from a 7×7
//! convolution over channel-pooled maps. Each map rescales the feature map
//! elementwise, channel first.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{uniform_init, Graph, Parameter, PoolMode, ReduceScope, Scalar, Tensor, Var};

pub const DEFAULT_REDUCTION_RATIO: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Bottleneck width `max(1, C / r)`.
pub fn hidden_width(channels: usize, reduction_ratio: usize) -> usize {
    (channels / reduction_ratio.max(1)).max(1)
}

/// Graph handles of one attention block's weights.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    /// `hidden × C`
    pub w0: Var,
    /// `C × hidden`
    pub w1: Var,
    /// `1 × 2 × 7 × 7`
    pub conv7: Var,
}

/// `σ(W1·relu(W0·avg(F)) + W1·relu(W0·max(F)))`, shaped `N×C×1×1`.
pub fn channel_attention<T: Scalar>(g: &mut Graph<T>, f: Var, w0: Var, w1: Var) -> Result<Var> {
    let [n, c, _, _] = g.value(f).dims4("channel_attention")?;
    let wd = g.value(w0).dims();
    if wd.len() != 2 || wd[1] != c {
        return Err(Error::shape(
            "channel_attention",
            "channels",
            wd.get(1).copied().unwrap_or(0),
            c,
        ));
    }
    let branch = |mode: PoolMode, g: &mut Graph<T>| -> Result<Var> {
        let pooled = g.reduce(f, ReduceScope::Spatial, mode)?;
        let flat = g.reshape(pooled, &[n, c])?;
        let hidden = g.affine(flat, w0, None)?;
        let hidden = g.relu(hidden);
        g.affine(hidden, w1, None)
    };
    let avg = branch(PoolMode::Avg, g)?;
    let max = branch(PoolMode::Max, g)?;
    let logits = g.add(avg, max)?;
    let mc = g.sigmoid(logits);
    g.reshape(mc, &[n, c, 1, 1])
}

/// `σ(conv7([mean_c(F); max_c(F)]))`, shaped `N×1×H×W` (padding 3).
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, f: Var, conv7: Var) -> Result<Var> {
    let avg = g.reduce(f, ReduceScope::Channel, PoolMode::Avg)?;
    let max = g.reduce(f, ReduceScope::Channel, PoolMode::Max)?;
    let stacked = g.concat_channels(avg, max)?;
    let logits = g.conv2d(stacked, conv7, None, SPATIAL_KERNEL / 2)?;
    Ok(g.sigmoid(logits))
}

/// `F' = Mc(F)⊗F`, `F'' = Ms(F')⊗F'`.
pub fn cbam<T: Scalar>(g: &mut Graph<T>, f: Var, vars: CbamVars) -> Result<Var> {
    let mc = channel_attention(g, f, vars.w0, vars.w1)?;
    let refined = g.mul(f, mc)?;
    let ms = spatial_attention(g, refined, vars.conv7)?;
    g.mul(refined, ms)
}

/// Standalone attention weights for one feature width.
#[derive(Clone, Debug)]
pub struct CbamParams<T: Scalar = f32> {
    pub w0: Parameter<T>,
    pub w1: Parameter<T>,
    pub conv7: Parameter<T>,
    pub reduction_ratio: usize,
}

impl<T: Scalar> CbamParams<T> {
    /// Uniform `±sqrt(1/fan_in)` initialization, no biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Self {
        let h = hidden_width(channels, reduction_ratio);
        let k = SPATIAL_KERNEL;
        CbamParams {
            w0: Parameter::new("cbam.w0", uniform_init(&[h, channels], channels, rng)),
            w1: Parameter::new("cbam.w1", uniform_init(&[channels, h], h, rng)),
            conv7: Parameter::new("cbam.conv7", uniform_init(&[1, 2, k, k], 2 * k * k, rng)),
            reduction_ratio,
        }
    }

    pub fn zeros(channels: usize, reduction_ratio: usize) -> Self {
        let h = hidden_width(channels, reduction_ratio);
        let k = SPATIAL_KERNEL;
        CbamParams {
            w0: Parameter::new("cbam.w0", Tensor::zeros(&[h, channels])),
            w1: Parameter::new("cbam.w1", Tensor::zeros(&[channels, h])),
            conv7: Parameter::new("cbam.conv7", Tensor::zeros(&[1, 2, k, k])),
            reduction_ratio,
        }
    }

    pub fn channels(&self) -> usize {
        self.w0.value.dims()[1]
    }

    pub fn into_params(self) -> Vec<Parameter<T>> {
        vec![self.w0, self.w1, self.conv7]
    }

    /// Loads the three weights as parameters `offset..offset+3`.
    pub fn load(&self, g: &mut Graph<T>, offset: usize) -> CbamVars {
        CbamVars {
            w0: g.param(&self.w0, offset),
            w1: g.param(&self.w1, offset + 1),
            conv7: g.param(&self.conv7, offset + 2),
        }
    }

    fn eval(&self, f: &Tensor<T>, which: fn(&mut Graph<T>, Var, CbamVars) -> Result<Var>) -> Result<Tensor<T>> {
        let batched = f.rank() == 3;
        let input = if batched { f.unsqueeze0() } else { f.clone() };
        let mut g = Graph::new();
        let x = g.input(input);
        let vars = self.load(&mut g, 0);
        let y = which(&mut g, x, vars)?;
        let out = g.value(y).clone();
        if batched {
            let dims = out.dims()[1..].to_vec();
            out.reshape(&dims)
        } else {
            Ok(out)
        }
    }

    /// Channel map of a `C×H×W` (or batched) feature map.
    pub fn channel_map(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(f, |g, x, v| channel_attention(g, x, v.w0, v.w1))
    }

    pub fn spatial_map(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(f, |g, x, v| spatial_attention(g, x, v.conv7))
    }

    pub fn apply(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(f, cbam)
    }
}
