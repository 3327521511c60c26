//! Parameter registration and the layer primitives shared by the encoders.

use dist_tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::Result;

/// Standard deviation of linear and attention weights at init.
pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a fixed frozen state, drawing from one RNG.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub frozen: bool,
}

impl<R: Rng> Builder<'_, R> {
    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.store.add(name, value, self.frozen)?;
        Ok(())
    }

    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::trunc_normal(shape, std, self.rng);
        self.tensor(name, t)
    }

    /// `{prefix}.w` as `[in, out]` and a zero `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        self.trunc_normal(format!("{prefix}.w"), &[input, output], INIT_STD)?;
        self.tensor(format!("{prefix}.b"), Tensor::zeros(&[output]))
    }

    /// A linear layer whose weight starts at zero.
    pub fn linear_zero(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        self.tensor(format!("{prefix}.w"), Tensor::zeros(&[input, output]))?;
        self.tensor(format!("{prefix}.b"), Tensor::zeros(&[output]))
    }

    /// Normalization affine with constant gain and zero bias.
    pub fn norm(&mut self, prefix: &str, channels: usize, gain: f64) -> Result<()> {
        self.tensor(format!("{prefix}.w"), Tensor::full(&[channels], gain))?;
        self.tensor(format!("{prefix}.b"), Tensor::zeros(&[channels]))
    }

    /// Convolution kernel of any layout whose last axis is the output
    /// channel; std scales with the fan-in `numel / cout`.
    pub fn conv(&mut self, prefix: &str, shape: &[usize], bias: bool) -> Result<()> {
        let cout = *shape.last().expect("kernel rank >= 1");
        let fan_in = shape.iter().product::<usize>() / cout;
        self.trunc_normal(format!("{prefix}.w"), shape, (1.0 / fan_in as f64).sqrt())?;
        if bias {
            self.tensor(format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
        }
        Ok(())
    }

    /// Pre-norm transformer block. With `zero_out` the two residual branches
    /// end in zero weights, so the block starts as the identity.
    pub fn transformer_block(&mut self, prefix: &str, c: usize, mlp_ratio: usize, zero_out: bool) -> Result<()> {
        self.norm(&format!("{prefix}.ln1"), c, 1.0)?;
        self.linear(&format!("{prefix}.attn.qkv"), c, 3 * c)?;
        if zero_out {
            self.linear_zero(&format!("{prefix}.attn.proj"), c, c)?;
        } else {
            self.linear(&format!("{prefix}.attn.proj"), c, c)?;
        }
        self.norm(&format!("{prefix}.ln2"), c, 1.0)?;
        self.linear(&format!("{prefix}.mlp.fc1"), c, mlp_ratio * c)?;
        if zero_out {
            self.linear_zero(&format!("{prefix}.mlp.fc2"), mlp_ratio * c, c)
        } else {
            self.linear(&format!("{prefix}.mlp.fc2"), mlp_ratio * c, c)
        }
    }
}

/// Forward-pass context: a tape plus the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub eps: f64,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, eps: f64) -> Self {
        Ctx { tape, store, eps }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        let id = self.store.id(name).ok_or_else(|| TensorError::Param {
            name: name.to_string(),
            reason: "not registered".into(),
        })?;
        Ok(self.tape.param(self.store, id))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    pub fn linear(&self, prefix: &str, x: &Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.linear(x, &w, Some(&b))?)
    }

    pub fn ln(&self, prefix: &str, x: &Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, &w, &b, self.eps)?)
    }

    /// `x + attn(ln1(x))`, then `+ mlp(ln2(.))`, over `[B, S, C]`.
    pub fn transformer_block(&self, prefix: &str, x: &Var, heads: usize) -> Result<Var> {
        let t = self.tape;
        let h = self.ln(&format!("{prefix}.ln1"), x)?;
        let qkv = self.linear(&format!("{prefix}.attn.qkv"), &h)?;
        let a = t.attention(&qkv, heads)?;
        let a = self.linear(&format!("{prefix}.attn.proj"), &a)?;
        let x = t.add(x, &a)?;
        let h = self.ln(&format!("{prefix}.ln2"), &x)?;
        let h = t.gelu(&self.linear(&format!("{prefix}.mlp.fc1"), &h)?);
        let h = self.linear(&format!("{prefix}.mlp.fc2"), &h)?;
        Ok(t.add(&x, &h)?)
    }
}
