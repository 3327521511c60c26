use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Temporal resampling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    /// Repeats every frame `factor` times.
    NearestUp,
    /// Linear interpolation along time with half-pixel centres
    /// (`align_corners = false`).
    TrilinearUp,
    /// Mean over non-overlapping windows of `factor` frames.
    AvgDown,
    /// Maximum over non-overlapping windows of `factor` frames.
    MaxDown,
}

impl ResampleMode {
    pub fn output_len(self, t: usize, factor: usize) -> usize {
        match self {
            ResampleMode::NearestUp | ResampleMode::TrilinearUp => t * factor,
            ResampleMode::AvgDown | ResampleMode::MaxDown => t / factor,
        }
    }
}

/// `(output frame, input frame, weight)` triples of a linear resampling.
fn linear_taps(mode: ResampleMode, t: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let mut taps = Vec::new();
    match mode {
        ResampleMode::NearestUp => {
            for o in 0..t * factor {
                taps.push((o, o / factor, 1.0));
            }
        }
        ResampleMode::TrilinearUp => {
            for o in 0..t * factor {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (t - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(t - 1);
                let frac = src - i0 as f64;
                taps.push((o, i0, 1.0 - frac));
                if frac > 0.0 {
                    taps.push((o, i1, frac));
                }
            }
        }
        ResampleMode::AvgDown => {
            let w = 1.0 / factor as f64;
            for o in 0..t / factor {
                for j in 0..factor {
                    taps.push((o, o * factor + j, w));
                }
            }
        }
        ResampleMode::MaxDown => unreachable!("max pooling is not linear"),
    }
    taps
}

impl Tape {
    /// Resamples the leading (time) axis of `x` by `factor`.
    pub fn resample_time(&self, x: &Var, mode: ResampleMode, factor: usize) -> Result<Var> {
        let shape = x.shape().to_vec();
        let t = shape[0];
        if factor == 0 {
            return Err(TensorError::Config("resample factor must be positive".into()));
        }
        if matches!(mode, ResampleMode::AvgDown | ResampleMode::MaxDown) && !t.is_multiple_of(factor) {
            return Err(TensorError::shape(
                "resample_time",
                format!("{t} frames are not divisible by factor {factor}"),
            ));
        }
        let frame = x.value().len() / t;
        let to = mode.output_len(t, factor);
        let xd = x.data();
        let mut data = vec![0.0; to * frame];
        let mut argmax = Vec::new();
        let taps = if mode == ResampleMode::MaxDown {
            argmax = vec![0usize; to * frame];
            for o in 0..to {
                for e in 0..frame {
                    let mut best = o * factor;
                    for i in o * factor + 1..(o + 1) * factor {
                        if xd[i * frame + e] > xd[best * frame + e] {
                            best = i;
                        }
                    }
                    data[o * frame + e] = xd[best * frame + e];
                    argmax[o * frame + e] = best * frame + e;
                }
            }
            Vec::new()
        } else {
            let taps = linear_taps(mode, t, factor);
            for &(o, i, w) in &taps {
                let (dst, src) = (&mut data[o * frame..(o + 1) * frame], &xd[i * frame..(i + 1) * frame]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
            taps
        };
        let mut out_shape = shape;
        out_shape[0] = to;
        let out = Tensor::from_parts(out_shape, data, x.dtype());
        if !x.tracked() {
            return Ok(Var::constant(out));
        }
        let n = x.value().len();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                if mode == ResampleMode::MaxDown {
                    for (gv, &src) in g.iter().zip(&argmax) {
                        gx[src] += gv;
                    }
                } else {
                    for &(o, i, w) in &taps {
                        let go = &g[o * frame..(o + 1) * frame];
                        for (d, s) in gx[i * frame..(i + 1) * frame].iter_mut().zip(go) {
                            *d += w * s;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
