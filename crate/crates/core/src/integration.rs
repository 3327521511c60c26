//! Integration branch: per-layer fusion blocks and the two cross-branch
//! maps between the integration stream `[T, N+1, αC]` and the temporal
//! stream `[γT, H/P, W/P, βC]`.

use dist_tensor::{ParamStore, ResampleMode, TensorError, Var};
use rand::Rng;

use crate::config::{DistConfig, PhiUp, PsiDown};
use crate::error::Result;
use crate::nn::{Builder, Ctx, INIT_STD};

pub const PREFIX: &str = "integ.";

fn block(l: usize) -> String {
    format!("integ.block{l}")
}

pub fn init<R: Rng>(cfg: &DistConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    let (c, alpha, beta, gamma) = (
        cfg.spatial.channels,
        cfg.integration.alpha_c,
        cfg.temporal.beta_c,
        cfg.temporal.gamma,
    );
    let hidden = cfg.integration.ffn_ratio * alpha;
    let ab = cfg.ablation;
    let mut b = Builder { store, rng, frozen: false };
    for l in 1..=cfg.spatial.layers {
        let p = block(l);
        if cfg.layer_active(l) {
            b.linear(&format!("{p}.fc_x"), c, alpha)?;
            if ab.psi_active() {
                b.trunc_normal(format!("{p}.z_cls"), &[cfg.spatial.frames, 1, alpha], INIT_STD)?;
                match cfg.integration.psi {
                    PsiDown::DConv => b.conv(&format!("{p}.dconv"), &[gamma, beta, alpha], true)?,
                    PsiDown::AvgPool | PsiDown::MaxPool => b.linear(&format!("{p}.psi_fc"), beta, alpha)?,
                }
            }
            b.norm(&format!("{p}.ln_ffn"), alpha, 1.0)?;
            b.linear(&format!("{p}.ffn1"), alpha, hidden)?;
            b.linear(&format!("{p}.ffn2"), hidden, alpha)?;
            b.norm(&format!("{p}.ln_tconv"), alpha, 1.0)?;
            if cfg.integration.tconv_depthwise {
                b.conv(&format!("{p}.tconv"), &[3, alpha], true)?;
            } else {
                b.conv(&format!("{p}.tconv"), &[3, alpha, alpha], true)?;
            }
            b.linear(&format!("{p}.tconv_fc"), alpha, alpha)?;
        }
        // The last layer's map back to the temporal stream would be unused.
        if ab.phi_active() && l < cfg.spatial.layers {
            b.linear(&format!("{p}.phi_fc"), alpha, beta)?;
            if cfg.integration.phi == PhiUp::Deconv {
                b.conv(&format!("{p}.deconv"), &[gamma, beta, beta], true)?;
            }
        }
    }
    Ok(())
}

/// Temporal-to-integration map of layer `l`: reduces `γT` frames to `T`,
/// lifts `βC` to `αC`, flattens the grid to `N` tokens and puts the layer's
/// class token at index 0.
pub fn psi(ctx: &Ctx, cfg: &DistConfig, l: usize, z: &Var) -> Result<Var> {
    let t = ctx.tape;
    let (frames, gamma) = (cfg.spatial.frames, cfg.temporal.gamma);
    if z.shape().len() != 4 || z.shape()[0] != frames * gamma {
        return Err(TensorError::shape(
            "psi",
            format!("expected {} frames of [H/P, W/P, βC], got {:?}", frames * gamma, z.shape()),
        )
        .into());
    }
    let p = block(l);
    let y = match cfg.integration.psi {
        PsiDown::DConv => {
            let w = ctx.p(&format!("{p}.dconv.w"))?;
            let b = ctx.p(&format!("{p}.dconv.b"))?;
            t.conv1d_time(z, &w, Some(&b), gamma, 0)?
        }
        PsiDown::AvgPool => ctx.linear(&format!("{p}.psi_fc"), &t.resample_time(z, ResampleMode::AvgDown, gamma)?)?,
        PsiDown::MaxPool => ctx.linear(&format!("{p}.psi_fc"), &t.resample_time(z, ResampleMode::MaxDown, gamma)?)?,
    };
    let tokens = cfg.spatial.tokens();
    let y = t.reshape(&y, &[frames, tokens, cfg.integration.alpha_c])?;
    Ok(t.concat(&[&ctx.p(&format!("{p}.z_cls"))?, &y], 1)?)
}

/// Integration-to-temporal map of layer `l` applied to `s = Y^(l-1) + fc_x(X^(l))`:
/// drops the class token, reduces `αC` to `βC`, expands `T` to `γT` frames and
/// restores the token grid.
pub fn phi(ctx: &Ctx, cfg: &DistConfig, l: usize, s: &Var) -> Result<Var> {
    let t = ctx.tape;
    let (gh, gw) = cfg.spatial.grid();
    let n = gh * gw;
    let shape = s.shape();
    if shape.len() != 3 || shape[1] != n + 1 {
        return Err(TensorError::shape(
            "phi",
            format!("expected [T, {}, αC] for a {gh}x{gw} grid, got {shape:?}", n + 1),
        )
        .into());
    }
    let p = block(l);
    let gamma = cfg.temporal.gamma;
    let h = ctx.linear(&format!("{p}.phi_fc"), &t.narrow(s, 1, 1, n)?)?;
    let up = match cfg.integration.phi {
        PhiUp::Nearest => t.resample_time(&h, ResampleMode::NearestUp, gamma)?,
        PhiUp::Trilinear => t.resample_time(&h, ResampleMode::TrilinearUp, gamma)?,
        PhiUp::Deconv => {
            let w = ctx.p(&format!("{p}.deconv.w"))?;
            let b = ctx.p(&format!("{p}.deconv.b"))?;
            t.conv_transpose_time(&h, &w, Some(&b), gamma)?
        }
    };
    Ok(t.reshape(&up, &[shape[0] * gamma, gh, gw, cfg.temporal.beta_c])?)
}

/// Two parallel paths over the fused input `ŷ`: a token-wise feed-forward
/// network and a temporal convolution followed by a linear map.
pub fn iblock(ctx: &Ctx, cfg: &DistConfig, l: usize, yhat: &Var) -> Result<Var> {
    let t = ctx.tape;
    let p = block(l);
    let a = ctx.ln(&format!("{p}.ln_ffn"), yhat)?;
    let a = t.gelu(&ctx.linear(&format!("{p}.ffn1"), &a)?);
    let a = ctx.linear(&format!("{p}.ffn2"), &a)?;

    let b = ctx.ln(&format!("{p}.ln_tconv"), yhat)?;
    let w = ctx.p(&format!("{p}.tconv.w"))?;
    let bias = ctx.p(&format!("{p}.tconv.b"))?;
    let b = if cfg.integration.tconv_depthwise {
        t.depthwise_conv1d_time(&b, &w, Some(&bias), 1, 1)?
    } else {
        t.conv1d_time(&b, &w, Some(&bias), 1, 1)?
    };
    let b = ctx.linear(&format!("{p}.tconv_fc"), &t.gelu(&b))?;

    let y = t.add(&a, &b)?;
    if cfg.integration.residual {
        Ok(t.add(&y, yhat)?)
    } else {
        Ok(y)
    }
}
