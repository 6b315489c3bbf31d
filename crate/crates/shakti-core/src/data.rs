//! Deterministic synthetic data: an order-2 Markov text source for language
//! modelling and a procedural glyph-OCR generator for image-caption training,
//! plus the evaluation metrics used on them.
//!
//! Every generator is a pure function of `(seed, params)`: identical inputs
//! produce byte-identical outputs on every platform. Train and held-out
//! splits draw from distinct named streams so they are disjoint by
//! construction.

use rand::Rng;

use crate::error::{Error, ImageError, Result};
use crate::model::{VlmModel, EOS_ID, FIRST_SYMBOL_ID};
use crate::params::Fwd;
use crate::rng::stream;
use crate::tensor::Element;
use crate::vision::Image;

/// Number of glyphs in the built-in font.
pub const GLYPH_SET_SIZE: usize = 16;

/// Display characters for the glyphs, index-aligned with [`FONT`].
pub const GLYPH_CHARS: [char; GLYPH_SET_SIZE] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'A', 'B', 'C', 'D', 'E', 'F',
];

/// Built-in 8x8 bitmap font: one byte per row, most-significant bit is the
/// leftmost pixel. Embedded so the generator has no file dependencies.
pub const FONT: [[u8; 8]; GLYPH_SET_SIZE] = [
    [0x3C, 0x66, 0x6E, 0x76, 0x66, 0x66, 0x3C, 0x00], // 0
    [0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00], // 1
    [0x3C, 0x66, 0x06, 0x0C, 0x18, 0x30, 0x7E, 0x00], // 2
    [0x3C, 0x66, 0x06, 0x1C, 0x06, 0x66, 0x3C, 0x00], // 3
    [0x0C, 0x1C, 0x3C, 0x6C, 0x7E, 0x0C, 0x0C, 0x00], // 4
    [0x7E, 0x60, 0x7C, 0x06, 0x06, 0x66, 0x3C, 0x00], // 5
    [0x1C, 0x30, 0x60, 0x7C, 0x66, 0x66, 0x3C, 0x00], // 6
    [0x7E, 0x06, 0x0C, 0x18, 0x30, 0x30, 0x30, 0x00], // 7
    [0x3C, 0x66, 0x66, 0x3C, 0x66, 0x66, 0x3C, 0x00], // 8
    [0x3C, 0x66, 0x66, 0x3E, 0x06, 0x0C, 0x38, 0x00], // 9
    [0x18, 0x3C, 0x66, 0x66, 0x7E, 0x66, 0x66, 0x00], // A
    [0x7C, 0x66, 0x66, 0x7C, 0x66, 0x66, 0x7C, 0x00], // B
    [0x3C, 0x66, 0x60, 0x60, 0x60, 0x66, 0x3C, 0x00], // C
    [0x78, 0x6C, 0x66, 0x66, 0x66, 0x6C, 0x78, 0x00], // D
    [0x7E, 0x60, 0x60, 0x78, 0x60, 0x60, 0x7E, 0x00], // E
    [0x7E, 0x60, 0x60, 0x78, 0x60, 0x60, 0x60, 0x00], // F
];

/// Token id of glyph index `g` (character-level tokenization: one id per
/// glyph symbol, after the special ids).
pub fn glyph_token(g: usize) -> usize {
    FIRST_SYMBOL_ID + g
}

/// Inverse of [`glyph_token`]; `None` for specials or out-of-font ids.
pub fn token_glyph(id: usize) -> Option<usize> {
    id.checked_sub(FIRST_SYMBOL_ID).filter(|&g| g < GLYPH_SET_SIZE)
}

/// Render caption token ids as a string of glyph characters.
pub fn caption_string(ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| token_glyph(id).map(|g| GLYPH_CHARS[g]).unwrap_or('?'))
        .collect()
}

// ---------------------------------------------------------------------------
// Order-2 Markov text source
// ---------------------------------------------------------------------------

/// An order-2 Markov chain over the non-special token ids
/// `[FIRST_SYMBOL_ID, vocab_size)`. For each ordered context pair the chain
/// moves to a `favored` symbol with probability 0.8, a distinct `second`
/// symbol with probability 0.15, and spreads the remaining 0.05 uniformly
/// over the other symbols. The table is a pure function of the seed, so a
/// train stream and a held-out stream from the same seed share one language.
pub struct MarkovSource {
    pub vocab_size: usize,
    /// Number of usable symbols.
    pub k: usize,
    favored: Vec<u16>,
    second: Vec<u16>,
}

pub const MARKOV_P_FAVORED: f64 = 0.8;
pub const MARKOV_P_SECOND: f64 = 0.15;

impl MarkovSource {
    pub fn new(seed: u64, vocab_size: usize) -> Result<Self> {
        if vocab_size < 4 {
            return Err(Error::Data(format!(
                "markov source needs vocab_size >= 4 (specials + at least one symbol), got {vocab_size}"
            )));
        }
        let k = vocab_size - FIRST_SYMBOL_ID;
        let mut r = stream(seed, "text/table");
        let mut favored = Vec::with_capacity(k * k);
        let mut second = Vec::with_capacity(k * k);
        for _ in 0..k * k {
            let f = r.random_range(0..k) as u16;
            favored.push(f);
            if k >= 2 {
                // A distinct second choice.
                let mut s = r.random_range(0..k - 1) as u16;
                if s >= f {
                    s += 1;
                }
                second.push(s);
            } else {
                second.push(f);
            }
        }
        Ok(MarkovSource {
            vocab_size,
            k,
            favored,
            second,
        })
    }

    fn ctx_index(&self, a: usize, b: usize) -> usize {
        (a - FIRST_SYMBOL_ID) * self.k + (b - FIRST_SYMBOL_ID)
    }

    /// The favored continuation of context `(a, b)`, as a token id.
    pub fn favored_next(&self, a: usize, b: usize) -> usize {
        FIRST_SYMBOL_ID + self.favored[self.ctx_index(a, b)] as usize
    }

    /// Per-step entropy of the transition distribution, in nats.
    pub fn entropy_rate(&self) -> f64 {
        let k = self.k as f64;
        if self.k == 1 {
            return 0.0;
        }
        if self.k == 2 {
            let p = MARKOV_P_FAVORED;
            let q = 1.0 - p;
            return -(p * p.ln() + q * q.ln());
        }
        let rest = 1.0 - MARKOV_P_FAVORED - MARKOV_P_SECOND;
        let each = rest / (k - 2.0);
        -(MARKOV_P_FAVORED * MARKOV_P_FAVORED.ln()
            + MARKOV_P_SECOND * MARKOV_P_SECOND.ln()
            + rest * each.ln())
    }

    /// Generate `n` tokens from the named split stream. Distinct split names
    /// yield disjoint randomness over the same language.
    pub fn tokens(&self, seed: u64, split: &str, n: usize) -> Vec<usize> {
        let mut r = stream(seed, &format!("text/{split}"));
        let mut out = Vec::with_capacity(n);
        let draw_uniform = |r: &mut rand_chacha::ChaCha8Rng| {
            FIRST_SYMBOL_ID + r.random_range(0..self.k)
        };
        while out.len() < n {
            let next = if out.len() < 2 {
                draw_uniform(&mut r)
            } else {
                let a = out[out.len() - 2];
                let b = out[out.len() - 1];
                let idx = self.ctx_index(a, b);
                let f = self.favored[idx] as usize;
                let s = self.second[idx] as usize;
                let u: f64 = r.random_range(0.0..1.0);
                let g = if self.k == 1 {
                    f
                } else if u < MARKOV_P_FAVORED {
                    f
                } else if u < MARKOV_P_FAVORED + MARKOV_P_SECOND || self.k == 2 {
                    s
                } else {
                    // Uniform over the k-2 symbols that are neither f nor s.
                    let mut t = r.random_range(0..self.k - 2);
                    for taken in [f.min(s), f.max(s)] {
                        if t >= taken {
                            t += 1;
                        }
                    }
                    t
                };
                FIRST_SYMBOL_ID + g
            };
            out.push(next);
        }
        out
    }
}

/// Deterministic stage-1 training stream: `n_tokens` ids drawn from the
/// order-2 Markov source derived from `seed`.
pub fn gen_text_corpus(seed: u64, n_tokens: usize, vocab_size: usize) -> Result<Vec<usize>> {
    Ok(MarkovSource::new(seed, vocab_size)?.tokens(seed, "train", n_tokens))
}

// ---------------------------------------------------------------------------
// Glyph OCR generator
// ---------------------------------------------------------------------------

/// Rendering parameters for glyph samples.
#[derive(Clone, Debug)]
pub struct GlyphParams {
    /// Square canvas edge in pixels.
    pub image_size: usize,
    /// Glyphs per image, laid out on a grid, read left-to-right then
    /// top-to-bottom.
    pub n_glyphs: usize,
    /// How many of the font's glyphs to draw from (prefix of the font).
    pub glyph_set_size: usize,
    /// Background gray level.
    pub background: u8,
    /// Ink gray level.
    pub foreground: u8,
    /// Inclusive integer scale range for the 8x8 bitmaps.
    pub min_scale: usize,
    pub max_scale: usize,
}

impl Default for GlyphParams {
    fn default() -> Self {
        GlyphParams {
            image_size: 448,
            n_glyphs: 4,
            glyph_set_size: GLYPH_SET_SIZE,
            background: 230,
            foreground: 25,
            min_scale: 2,
            max_scale: 4,
        }
    }
}

/// One OCR training sample: the rendered image and its ground-truth caption
/// (glyph token ids in reading order, no EOS).
pub struct GlyphSample {
    pub image: Image,
    pub caption_ids: Vec<usize>,
    pub seed: u64,
}

/// Render a glyph sample. Layout: glyphs occupy the cells of the smallest
/// square grid holding `n_glyphs`; each glyph gets a random identity, an
/// integer scale from the configured range (clamped to what fits), and a
/// random offset inside its cell, leaving a 1px margin so cell borders stay
/// background-colored. Deterministic in `(seed, params)`.
pub fn gen_glyph_sample(seed: u64, params: &GlyphParams) -> Result<GlyphSample> {
    if params.n_glyphs == 0 {
        return Err(ImageError::GlyphLayout {
            image_size: params.image_size,
            n_glyphs: 0,
            msg: "need at least one glyph".into(),
        }
        .into());
    }
    if params.glyph_set_size == 0 || params.glyph_set_size > GLYPH_SET_SIZE {
        return Err(Error::Data(format!(
            "glyph_set_size must be in [1, {GLYPH_SET_SIZE}], got {}",
            params.glyph_set_size
        )));
    }
    if params.min_scale == 0 || params.min_scale > params.max_scale {
        return Err(Error::Data(format!(
            "bad glyph scale range [{}, {}]",
            params.min_scale, params.max_scale
        )));
    }
    let grid = (params.n_glyphs as f64).sqrt().ceil() as usize;
    let cell = params.image_size / grid;
    // Largest scale whose 8px bitmap plus a 1px margin on each side fits.
    let fit_scale = cell.saturating_sub(2) / 8;
    if fit_scale < params.min_scale {
        return Err(ImageError::GlyphLayout {
            image_size: params.image_size,
            n_glyphs: params.n_glyphs,
            msg: format!(
                "cells of {cell}px cannot hold a glyph at minimum scale {} (needs {}px)",
                params.min_scale,
                8 * params.min_scale + 2
            ),
        }
        .into());
    }
    let max_scale = params.max_scale.min(fit_scale);

    let mut r = stream(seed, "glyph/sample");
    let mut pixels = vec![params.background; params.image_size * params.image_size * 3];
    let mut caption = Vec::with_capacity(params.n_glyphs);
    for i in 0..params.n_glyphs {
        let g = r.random_range(0..params.glyph_set_size);
        let scale = r.random_range(params.min_scale..=max_scale);
        let span = 8 * scale;
        let ox = 1 + r.random_range(0..=cell - span - 2);
        let oy = 1 + r.random_range(0..=cell - span - 2);
        let cell_row = i / grid;
        let cell_col = i % grid;
        let y0 = cell_row * cell + oy;
        let x0 = cell_col * cell + ox;
        for (row, bits) in FONT[g].iter().enumerate() {
            for col in 0..8 {
                if bits & (0x80 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let y = y0 + row * scale + dy;
                        let x = x0 + col * scale + dx;
                        let at = (y * params.image_size + x) * 3;
                        pixels[at] = params.foreground;
                        pixels[at + 1] = params.foreground;
                        pixels[at + 2] = params.foreground;
                    }
                }
            }
        }
        caption.push(glyph_token(g));
    }
    Ok(GlyphSample {
        image: Image::new(params.image_size, params.image_size, pixels)?,
        caption_ids: caption,
        seed,
    })
}

/// A preference pair for the optional DPO objective: the correct caption and
/// a rejected caption with one glyph substituted.
pub struct PreferencePair {
    pub sample: GlyphSample,
    pub rejected_ids: Vec<usize>,
}

pub fn gen_preference_pair(seed: u64, params: &GlyphParams) -> Result<PreferencePair> {
    let sample = gen_glyph_sample(seed, params)?;
    let mut r = stream(seed, "glyph/reject");
    let pos = r.random_range(0..sample.caption_ids.len());
    let true_g = token_glyph(sample.caption_ids[pos]).expect("caption holds glyph ids");
    let wrong = if params.glyph_set_size >= 2 {
        let mut g = r.random_range(0..params.glyph_set_size - 1);
        if g >= true_g {
            g += 1;
        }
        g
    } else {
        true_g
    };
    let mut rejected = sample.caption_ids.clone();
    rejected[pos] = glyph_token(wrong);
    Ok(PreferencePair {
        sample,
        rejected_ids: rejected,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// 1 iff the sequences are identical (length and content).
pub fn exact_match(predicted: &[usize], target: &[usize]) -> bool {
    predicted == target
}

/// Fraction of pairs that match exactly.
pub fn pair_accuracy(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(p, t)| exact_match(p, t)).count();
    hits as f64 / pairs.len() as f64
}

/// Greedy-decode each sample's caption from its image and score exact match.
pub fn corpus_accuracy<E: Element>(model: &VlmModel<E>, samples: &[GlyphSample]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let max_new = s.caption_ids.len() + 2;
        let pred = model.greedy_decode(Some(&s.image), &[], max_new, EOS_ID)?;
        pairs.push((pred, s.caption_ids.clone()));
    }
    Ok(pair_accuracy(&pairs))
}

/// Mean next-token negative log-likelihood of a token stream under the
/// model, consumed in non-overlapping windows of the model's context size.
pub fn mean_nll<E: Element>(model: &VlmModel<E>, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Data("perplexity needs a non-empty stream".into()));
    }
    let window = model.cfg.max_seq_len - 1;
    let fwd = Fwd::inference();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in tokens.chunks(window) {
        let out = model.text_forward(chunk, model.cfg.max_seq_len, &fwd)?;
        total += out.loss.item()?.f64() * out.supervised_tokens as f64;
        count += out.supervised_tokens;
    }
    Ok(total / count as f64)
}

/// exp(mean NLL): vocab_size for a uniform predictor, 1.0 in the limit of a
/// perfect one.
pub fn perplexity<E: Element>(model: &VlmModel<E>, tokens: &[usize]) -> Result<f64> {
    Ok(mean_nll(model, tokens)?.exp())
}
