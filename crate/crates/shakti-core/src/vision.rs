//! Vision frontend: dynamic patch-size planning, bilinear image resizing,
//! patch extraction, patch embedding, and binary PPM I/O.
//!
//! Patch planning picks the smallest patch size whose token grid fits the
//! budget, so small images keep fine detail (many small patches) while large
//! images degrade gracefully to coarser patches instead of exploding the
//! sequence length.

use std::path::Path;

use crate::error::{ImageError, Result, TensorError};
use crate::nn::PosBiasTable;
use crate::params::{Fwd, Param};
use crate::tensor::{Element, Tensor};

/// Supported patch edge lengths, ascending.
pub const PATCH_SIZES: [usize; 6] = [14, 16, 20, 24, 28, 32];

/// An 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageError::BadDimensions {
                height,
                width,
                msg: "zero-sized image".into(),
            }
            .into());
        }
        if pixels.len() != height * width * 3 {
            return Err(ImageError::BadDimensions {
                height,
                width,
                msg: format!("expected {} pixel bytes, got {}", height * width * 3, pixels.len()),
            }
            .into());
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image::new(height, width, pixels)
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// How an image will be tokenised: patch size, padded target dims, grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlan {
    pub patch_size: usize,
    /// Image dims after resizing: the next multiples of `patch_size`.
    pub resized_h: usize,
    pub resized_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchPlan {
    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Row/column coordinate of every patch, row-major.
    pub fn grid_coords(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.token_count();
        let mut rows = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        for r in 0..self.grid_h {
            for c in 0..self.grid_w {
                rows.push(r);
                cols.push(c);
            }
        }
        (rows, cols)
    }
}

/// Choose the smallest patch size whose grid fits within `budget` tokens.
pub fn plan_patches(height: usize, width: usize, budget: usize) -> Result<PatchPlan> {
    if height == 0 || width == 0 {
        return Err(ImageError::BadDimensions {
            height,
            width,
            msg: "cannot plan patches for an empty image".into(),
        }
        .into());
    }
    for &p in PATCH_SIZES.iter() {
        let grid_h = height.div_ceil(p);
        let grid_w = width.div_ceil(p);
        if grid_h * grid_w <= budget {
            return Ok(PatchPlan {
                patch_size: p,
                resized_h: grid_h * p,
                resized_w: grid_w * p,
                grid_h,
                grid_w,
            });
        }
    }
    Err(ImageError::NoFeasiblePatchSize {
        height,
        width,
        budget,
        sizes: PATCH_SIZES.to_vec(),
    }
    .into())
}

/// Bilinear resize (align-corners). Resizing to the original size is the
/// identity.
pub fn resize_image(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::BadDimensions {
            height: out_h,
            width: out_w,
            msg: "cannot resize to an empty image".into(),
        }
        .into());
    }
    let coord = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        if out_n == 1 || in_n == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
        let lo = (s.floor() as usize).min(in_n - 1);
        let hi = (lo + 1).min(in_n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, img.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, img.width);
            for ch in 0..3 {
                let at = |r: usize, c: usize| img.pixels[(r * img.width + c) * 3 + ch] as f64;
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_h, out_w, pixels)
}

/// Cut a resized image into flattened patches: `[n_patches, 3 * p * p]`,
/// pixel values mapped to `[-1, 1]`. Patch vectors are laid out by patch
/// row, then patch column, then channel.
pub fn patchify<E: Element>(img: &Image, plan: &PatchPlan) -> Result<Tensor<E>> {
    if img.height != plan.resized_h || img.width != plan.resized_w {
        return Err(TensorError::Invalid {
            op: "patchify",
            msg: format!(
                "image is {}x{} but the plan expects {}x{}; resize first",
                img.height, img.width, plan.resized_h, plan.resized_w
            ),
        }
        .into());
    }
    let p = plan.patch_size;
    let dim = 3 * p * p;
    let n = plan.token_count();
    let mut data = Vec::with_capacity(n * dim);
    for gy in 0..plan.grid_h {
        for gx in 0..plan.grid_w {
            for py in 0..p {
                for px in 0..p {
                    let row = gy * p + py;
                    let col = gx * p + px;
                    let base = (row * img.width + col) * 3;
                    for ch in 0..3 {
                        data.push(E::c(img.pixels[base + ch] as f64 / 127.5 - 1.0));
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, &[n, dim])
}

/// Inverse of [`patchify`] for testing: rebuild the image from patch rows.
pub fn reassemble<E: Element>(patches: &Tensor<E>, plan: &PatchPlan) -> Result<Image> {
    let p = plan.patch_size;
    let dim = 3 * p * p;
    if patches.shape() != [plan.token_count(), dim] {
        return Err(TensorError::Invalid {
            op: "reassemble",
            msg: format!(
                "patches shaped {:?} do not match plan grid {}x{} with dim {}",
                patches.shape(),
                plan.grid_h,
                plan.grid_w,
                dim
            ),
        }
        .into());
    }
    let mut img = Image::filled(plan.resized_h, plan.resized_w, [0, 0, 0])?;
    let d = patches.data();
    for gy in 0..plan.grid_h {
        for gx in 0..plan.grid_w {
            let pi = gy * plan.grid_w + gx;
            for py in 0..p {
                for px in 0..p {
                    let o = pi * dim + (py * p + px) * 3;
                    let to_u8 = |v: E| ((v.f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    img.set(
                        gy * p + py,
                        gx * p + px,
                        [to_u8(d[o]), to_u8(d[o + 1]), to_u8(d[o + 2])],
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Linear patch embedding plus interpolated positional bias:
/// `patches * w + bias`, giving `[n_patches, dim]` encoder inputs.
pub fn embed_patches<E: Element>(
    patches: &Tensor<E>,
    w: &Param<E>,
    plan: &PatchPlan,
    pos_bias: &PosBiasTable<E>,
    fwd: &Fwd<'_, E>,
) -> Result<Tensor<E>> {
    let wt = fwd.bind(w)?;
    if patches.rank() != 2 || wt.shape()[0] != patches.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "embed_patches",
            lhs: patches.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        }
        .into());
    }
    let emb = patches.matmul(&wt)?;
    let bias = pos_bias.bias_for(plan.grid_h, plan.grid_w, fwd)?;
    emb.add(&bias)
}

/// Write a binary PPM (P6, maxval 255).
pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255).
pub fn load_ppm(path: &Path) -> Result<Image> {
    parse_ppm(&std::fs::read(path)?)
}

/// Parse a binary PPM from memory. `#` comments are allowed in the header.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::UnsupportedFormat { found }.into());
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(ImageError::Parse {
                        offset: pos,
                        msg: "header ended before width, height and maxval".into(),
                    }
                    .into())
                }
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(ImageError::Parse {
                offset: pos,
                msg: format!("expected a decimal integer, found byte {:?}", bytes[pos] as char),
            }
            .into());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| ImageError::Parse {
            offset: start,
            msg: format!("integer {text} out of range"),
        })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::Parse {
            offset: pos,
            msg: format!("only maxval 255 is supported, got {maxval}"),
        }
        .into());
    }
    // Exactly one whitespace byte separates the header from pixel data.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::Parse {
                offset: pos,
                msg: "expected a whitespace separator after maxval".into(),
            }
            .into())
        }
    }
    let need = width * height * 3;
    let have = bytes.len() - pos;
    if have < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            msg: format!("pixel data truncated: need {need} bytes, have {have}"),
        }
        .into());
    }
    Image::new(height, width, bytes[pos..pos + need].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_picks_smallest_feasible_patch() {
        // Square reference points for a 1024-token budget.
        let cases = [
            (224usize, 14usize, 16usize, 256usize),
            (448, 14, 32, 1024),
            (512, 16, 32, 1024),
            (1024, 32, 32, 1024),
            (112, 14, 8, 64),
        ];
        for (side, patch, grid, tokens) in cases {
            let plan = plan_patches(side, side, 1024).unwrap();
            assert_eq!(plan.patch_size, patch, "side {side}");
            assert_eq!(plan.grid_h, grid, "side {side}");
            assert_eq!(plan.grid_w, grid, "side {side}");
            assert_eq!(plan.token_count(), tokens, "side {side}");
            assert_eq!(plan.resized_h, grid * patch);
        }
    }

    #[test]
    fn plan_handles_non_square_and_padding() {
        let plan = plan_patches(300, 500, 1024).unwrap();
        // 14: ceil(300/14)=22, ceil(500/14)=36 -> 792 <= 1024.
        assert_eq!(plan.patch_size, 14);
        assert_eq!((plan.grid_h, plan.grid_w), (22, 36));
        assert_eq!((plan.resized_h, plan.resized_w), (308, 504));
        // A 100x100 image needs no big patches at all.
        let small = plan_patches(100, 100, 1024).unwrap();
        assert_eq!(small.patch_size, 14);
        assert_eq!(small.token_count(), 64);
    }

    #[test]
    fn plan_errors_when_budget_is_impossible() {
        let err = plan_patches(3200, 3200, 64).unwrap_err();
        assert!(err.to_string().contains("budget of 64"), "{err}");
        assert!(plan_patches(0, 10, 64).is_err());
    }

    #[test]
    fn plan_monotonicity_bigger_images_never_get_smaller_patches() {
        // 32 * 32 = 1024 pixels per side is the largest square that fits the
        // 1024-token budget; anything bigger must error.
        let mut last = 0usize;
        for side in (50..=1024).step_by(37).chain([1024]) {
            let p = plan_patches(side, side, 1024).unwrap().patch_size;
            assert!(p >= last, "side {side}: patch {p} after {last}");
            last = p;
        }
        assert!(plan_patches(1025, 1025, 1024).is_err());
    }

    #[test]
    fn resize_identity_and_solid_color() {
        let mut img = Image::filled(5, 7, [10, 20, 30]).unwrap();
        img.set(2, 3, [200, 100, 50]);
        let same = resize_image(&img, 5, 7).unwrap();
        assert_eq!(same, img);
        let solid = Image::filled(4, 4, [77, 88, 99]).unwrap();
        let up = resize_image(&solid, 9, 13).unwrap();
        assert!(up.pixels.chunks(3).all(|p| p == [77, 88, 99]));
    }

    #[test]
    fn resize_interpolates_midpoints() {
        // 1x2 black/white row upscaled to 1x3: middle pixel is the average.
        let img = Image::new(1, 2, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let up = resize_image(&img, 1, 3).unwrap();
        assert_eq!(up.get(0, 0), [0, 0, 0]);
        assert_eq!(up.get(0, 1), [128, 128, 128]);
        assert_eq!(up.get(0, 2), [255, 255, 255]);
    }

    #[test]
    fn patchify_roundtrips_exactly() {
        let mut r = crate::rng::stream(31, "test/patchify");
        use rand::Rng;
        let plan = plan_patches(28, 42, 1024).unwrap();
        assert_eq!(plan.patch_size, 14);
        let pixels: Vec<u8> = (0..plan.resized_h * plan.resized_w * 3)
            .map(|_| r.random_range(0..=255u32) as u8)
            .collect();
        let img = Image::new(plan.resized_h, plan.resized_w, pixels).unwrap();
        let patches: Tensor<f64> = patchify(&img, &plan).unwrap();
        assert_eq!(patches.shape(), &[plan.token_count(), 3 * 14 * 14]);
        for &v in patches.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        let back = reassemble(&patches, &plan).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patchify_requires_resized_dims() {
        let plan = plan_patches(20, 20, 1024).unwrap(); // resized to 28x28
        let img = Image::filled(20, 20, [0, 0, 0]).unwrap();
        let err = patchify::<f32>(&img, &plan).unwrap_err();
        assert!(err.to_string().contains("resize first"), "{err}");
    }

    #[test]
    fn grid_coords_are_row_major() {
        let plan = plan_patches(28, 42, 1024).unwrap(); // 2x3 grid
        let (rows, cols) = plan.grid_coords();
        assert_eq!(rows, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(cols, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn embed_patches_applies_weight_and_bias() {
        use crate::params::Component;
        let plan = plan_patches(28, 28, 1024).unwrap(); // 2x2 grid of 14px
        let img = Image::filled(28, 28, [255, 255, 255]).unwrap();
        let patches: Tensor<f64> = patchify(&img, &plan).unwrap();
        let dim_in = 3 * 14 * 14;
        // Weight of all zeros except the first output channel sums inputs.
        let mut wdata = vec![0.0f64; dim_in * 2];
        for i in 0..dim_in {
            wdata[i * 2] = 1.0;
        }
        let w = Param::new("enc.embed14", Component::Encoder, &[dim_in, 2], wdata);
        let bias = PosBiasTable::new("enc.pos", Component::Encoder, 2, 2, 2, 5);
        let fwd = Fwd::inference();
        let out = embed_patches(&patches, &w, &plan, &bias, &fwd).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        // White pixels map to +1, so channel 0 is dim_in + bias.
        for (i, row) in out.data().chunks(2).enumerate() {
            let b = bias.table.data[i * 2];
            assert!((row[0] - (dim_in as f64 + b)).abs() < 1e-9);
            assert!((row[1] - bias.table.data[i * 2 + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn ppm_roundtrip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = Image::filled(3, 2, [1, 2, 3]).unwrap();
        img.set(2, 1, [250, 251, 252]);
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back, img);

        // Comments in the header are fine.
        let with_comment = b"P6\n# a comment\n2 1\n255\nabcdef".to_vec();
        let parsed = parse_ppm(&with_comment).unwrap();
        assert_eq!((parsed.width, parsed.height), (2, 1));

        assert!(matches!(
            parse_ppm(b"P5\n1 1\n255\nxxx"),
            Err(crate::Error::Image(ImageError::UnsupportedFormat { .. }))
        ));
        let truncated = parse_ppm(b"P6\n4 4\n255\nshort");
        let msg = truncated.unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");
        let bad_maxval = parse_ppm(b"P6\n1 1\n65535\nxxxxxx");
        assert!(bad_maxval.unwrap_err().to_string().contains("maxval"));
        let no_header = parse_ppm(b"P6\n1\n");
        assert!(no_header.is_err());
    }
}
