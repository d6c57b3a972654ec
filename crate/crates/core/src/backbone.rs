//! Patch-embedding backbone producing the `T x H x W x C` token grid.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature grid with the fixed token order `n = t * P + (h * W + w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<S> {
    pub t_frames: usize,
    pub h_cells: usize,
    pub w_cells: usize,
    pub channels: usize,
    /// `[T, H, W, C]`
    pub features: Tensor<S>,
}

impl<S: Scalar> TokenGrid<S> {
    pub fn new(features: Tensor<S>) -> Result<Self> {
        match *features.shape() {
            [t, h, w, c] => Ok(Self {
                t_frames: t,
                h_cells: h,
                w_cells: w,
                channels: c,
                features,
            }),
            _ => dim_err("token_grid", format!("expected [T, H, W, C], got {:?}", features.shape())),
        }
    }

    /// Reshapes `[N, C]` tokens back onto a grid.
    pub fn from_tokens(tokens: &Tensor<S>, t: usize, h: usize, w: usize) -> Result<Self> {
        let c = tokens.last_dim();
        Self::new(tokens.reshape(vec![t, h, w, c])?)
    }

    pub fn sites(&self) -> usize {
        self.h_cells * self.w_cells
    }

    pub fn num_tokens(&self) -> usize {
        self.t_frames * self.sites()
    }

    pub fn token_index(&self, t: usize, h: usize, w: usize) -> usize {
        t * self.sites() + h * self.w_cells + w
    }

    /// `[N, C]` view in token order.
    pub fn tokens(&self) -> Tensor<S> {
        self.features
            .reshape(vec![self.num_tokens(), self.channels])
            .expect("grid reshapes to tokens")
    }
}

/// Patch geometry of a clip: `(frames, cells_h, cells_w, patch_len)`.
pub fn patch_layout(clip_shape: &[usize], patch: [usize; 2]) -> Result<(usize, usize, usize, usize)> {
    let [t, hp, wp, ch] = *clip_shape else {
        return dim_err("patch_embed", format!("clip must be [T, H, W, ch], got {clip_shape:?}"));
    };
    let [ph, pw] = patch;
    if ph == 0 || pw == 0 || hp % ph != 0 || wp % pw != 0 {
        return dim_err(
            "patch_embed",
            format!("{hp}x{wp} pixels not divisible into {ph}x{pw} patches"),
        );
    }
    Ok((t, hp / ph, wp / pw, ph * pw * ch))
}

/// Flattens non-overlapping patches into an `[N, ph * pw * ch]` matrix. Within
/// a patch the order is `(dy, dx, channel)`.
pub fn extract_patches<S: Scalar>(clip: &Tensor<S>, patch: [usize; 2]) -> Result<Tensor<S>> {
    let (t, gh, gw, d) = patch_layout(clip.shape(), patch)?;
    let [_, hp, wp, ch] = *clip.shape() else { unreachable!() };
    let [ph, pw] = patch;
    let src = clip.data();
    let mut out = Vec::with_capacity(t * gh * gw * d);
    for f in 0..t {
        for cy in 0..gh {
            for cx in 0..gw {
                for dy in 0..ph {
                    let y = cy * ph + dy;
                    let start = ((f * hp + y) * wp + cx * pw) * ch;
                    out.extend_from_slice(&src[start..start + pw * ch]);
                }
            }
        }
    }
    Tensor::new(vec![t * gh * gw, d], out)
}

/// Linear patch projection recorded on a tape: `[N, D] x [D, C] + b`.
pub fn patch_embed_on<S: Scalar>(tape: &mut Tape<S>, patches: Var, weight: Var, bias: Var) -> Result<Var> {
    let proj = tape.matmul(patches, weight)?;
    tape.add_row(proj, bias)
}

/// Value-level patch embedding.
pub fn patch_embed<S: Scalar>(
    clip: &Tensor<S>,
    patch: [usize; 2],
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<TokenGrid<S>> {
    let (t, gh, gw, d) = patch_layout(clip.shape(), patch)?;
    if weight.shape().first() != Some(&d) {
        return dim_err("patch_embed", format!("weight {:?} for patch length {d}", weight.shape()));
    }
    let patches = extract_patches(clip, patch)?;
    let mut tape = Tape::new();
    let p = tape.leaf(&patches);
    let w = tape.leaf(weight);
    let b = tape.leaf(bias);
    let out = patch_embed_on(&mut tape, p, w, b)?;
    TokenGrid::from_tokens(&tape.tensor(out), t, gh, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_clip_gives_zero_grid() {
        let c = Tensor::<f64>::zeros(vec![2, 4, 4, 1]).unwrap();
        let w = Tensor::from_fn(vec![4, 3], |i| i as f64).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        let g = patch_embed(&c, [2, 2], &w, &b).unwrap();
        assert_eq!(g.features.shape(), &[2, 2, 2, 3]);
        assert!(g.features.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_patch_identity_projection() {
        let c = clip(vec![1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::ones(vec![1, 1]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let g = patch_embed(&c, [1, 1], &w, &b).unwrap();
        assert_eq!(g.features.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn whole_clip_patch_sums_pixels() {
        let c = clip(vec![1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::ones(vec![4, 1]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let g = patch_embed(&c, [2, 2], &w, &b).unwrap();
        assert_eq!(g.features.data(), &[10.0]);
    }

    #[test]
    fn non_divisible_resolution_is_rejected() {
        let c = Tensor::<f64>::zeros(vec![1, 5, 4, 1]).unwrap();
        let w = Tensor::ones(vec![4, 1]).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        assert!(patch_embed(&c, [2, 2], &w, &b).is_err());
    }

    #[test]
    fn patch_order_is_row_major_within_patch() {
        // 1 frame, 2x4 pixels, 2 channels; patch 2x2 -> two tokens of length 8
        let c = Tensor::from_fn(vec![1, 2, 4, 2], |i| i as f64).unwrap();
        let p = extract_patches(&c, [2, 2]).unwrap();
        assert_eq!(p.shape(), &[2, 8]);
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(&p.data()[8..], &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn token_index_matches_flattening() {
        let f = Tensor::from_fn(vec![2, 2, 3, 1], |i| i as f64).unwrap();
        let g = TokenGrid::new(f).unwrap();
        let toks = g.tokens();
        for t in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    let n = g.token_index(t, h, w);
                    assert_eq!(toks.data()[n], g.features.get(&[t, h, w, 0]));
                }
            }
        }
    }
}
