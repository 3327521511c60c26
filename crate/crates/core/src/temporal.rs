//! Lightweight trainable encoder over the dense frames. It never reduces
//! the temporal length: every state is `[γT, H/P, W/P, βC]`.

use dist_tensor::{ConvSpec, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::{DistConfig, TBlockKind};
use crate::error::{CoreError, Result};
use crate::nn::{Builder, Ctx};

pub const PREFIX: &str = "temporal.";
const JOINT_MLP_RATIO: usize = 4;

pub fn init<R: Rng>(cfg: &DistConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    let (p, beta) = (cfg.spatial.patch, cfg.temporal.beta_c);
    let mut b = Builder { store, rng, frozen: false };
    b.conv("temporal.stem", &[3, p, p, 3, beta], true)?;
    for l in 1..=cfg.spatial.layers {
        let prefix = format!("temporal.block{l}");
        match cfg.temporal.kind {
            TBlockKind::R21d => {
                b.conv(&format!("{prefix}.conv_s"), &[1, 3, 3, beta, beta], true)?;
                b.norm(&format!("{prefix}.ln_s"), beta, 1.0)?;
                b.conv(&format!("{prefix}.conv_t"), &[3, 1, 1, beta, beta], true)?;
                // Zero final gain: the block starts as the identity.
                b.norm(&format!("{prefix}.ln_t"), beta, 0.0)?;
            }
            TBlockKind::C3d => {
                b.conv(&format!("{prefix}.conv"), &[3, 3, 3, beta, beta], true)?;
                b.norm(&format!("{prefix}.ln"), beta, 0.0)?;
            }
            TBlockKind::JointAttention => {
                b.transformer_block(&prefix, beta, JOINT_MLP_RATIO, true)?;
            }
        }
    }
    Ok(())
}

/// Tokenizes the dense frames `[γT, H, W, 3]` into `Z^(0)`.
pub fn stem(ctx: &Ctx, cfg: &DistConfig, frames: &Tensor) -> Result<Var> {
    let p = cfg.spatial.patch;
    let expect = [cfg.dense_frames(), cfg.spatial.height, cfg.spatial.width, 3];
    if frames.shape() != expect {
        return Err(CoreError::Tensor(dist_tensor::TensorError::ShapeMismatch {
            op: "temporal stem",
            lhs: frames.shape().to_vec(),
            rhs: expect.to_vec(),
        }));
    }
    let w = ctx.p("temporal.stem.w")?;
    let b = ctx.p("temporal.stem.b")?;
    let x = Var::constant(frames.clone());
    Ok(ctx.tape.conv3d(&x, &w, Some(&b), ConvSpec::new([1, p, p], [1, 0, 0]))?)
}

fn conv_norm_act(ctx: &Ctx, conv: &str, norm: &str, z: &Var, pad: [usize; 3]) -> Result<Var> {
    let w = ctx.p(&format!("{conv}.w"))?;
    let b = ctx.p(&format!("{conv}.b"))?;
    let h = ctx.tape.conv3d(z, &w, Some(&b), ConvSpec::new([1; 3], pad))?;
    Ok(ctx.tape.gelu(&ctx.ln(norm, &h)?))
}

/// Block `l` (1-based) applied to `z`; shape is preserved.
pub fn tblock(ctx: &Ctx, cfg: &DistConfig, l: usize, z: &Var) -> Result<Var> {
    let t = ctx.tape;
    let prefix = format!("temporal.block{l}");
    let out = match cfg.temporal.kind {
        TBlockKind::R21d => {
            let h = conv_norm_act(ctx, &format!("{prefix}.conv_s"), &format!("{prefix}.ln_s"), z, [0, 1, 1])?;
            let h = conv_norm_act(ctx, &format!("{prefix}.conv_t"), &format!("{prefix}.ln_t"), &h, [1, 0, 0])?;
            t.add(z, &h)?
        }
        TBlockKind::C3d => {
            let h = conv_norm_act(ctx, &format!("{prefix}.conv"), &format!("{prefix}.ln"), z, [1, 1, 1])?;
            t.add(z, &h)?
        }
        TBlockKind::JointAttention => {
            let shape = z.shape().to_vec();
            let tokens: usize = shape[..3].iter().product();
            let flat = t.reshape(z, &[1, tokens, shape[3]])?;
            let y = ctx.transformer_block(&prefix, &flat, cfg.temporal.heads)?;
            t.reshape(&y, &shape)?
        }
    };
    Ok(out)
}

/// `Z^(l) = TBlock_l(Z^(l-1) + Ẑ^(l-1))`; a missing guidance term is zero.
pub fn step(ctx: &Ctx, cfg: &DistConfig, l: usize, z: &Var, guidance: Option<&Var>) -> Result<Var> {
    let input = match guidance {
        Some(g) => ctx.tape.add(z, g)?,
        None => z.clone(),
    };
    tblock(ctx, cfg, l, &input)
}
