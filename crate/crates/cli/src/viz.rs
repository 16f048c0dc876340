//! Filter montages and probability heatmaps.

use deconvparse::Tensor;

/// Tiles the filters of a `[K_out, K_in, h, w]` bank on a square grid with a one-pixel
/// border. Three-channel filters become colour tiles; otherwise every `(out, in)` slice
/// is its own gray tile. Each tile is stretched to the full range on its own.
pub fn filter_montage(filters: &Tensor) -> Tensor {
    let s = filters.shape();
    let (k_out, k_in, kh, kw) = (s[0], s[1], s[2], s[3]);
    let colour = k_in == 3;
    let tiles = if colour { k_out } else { k_out * k_in };
    let cols = (tiles as f64).sqrt().ceil() as usize;
    let rows = tiles.div_ceil(cols);
    let (h, w) = (rows * (kh + 1) + 1, cols * (kw + 1) + 1);
    let mut img = vec![0.0; 3 * h * w];
    let plane = kh * kw;
    for t in 0..tiles {
        let chans = if colour { 3 } else { 1 };
        let src = &filters.data()[t * chans * plane..(t + 1) * chans * plane];
        let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (r0, c0) = ((t / cols) * (kh + 1) + 1, (t % cols) * (kw + 1) + 1);
        for ch in 0..3 {
            let from = if colour { ch } else { 0 };
            for y in 0..kh {
                for x in 0..kw {
                    img[ch * h * w + (r0 + y) * w + c0 + x] = (src[from * plane + y * kw + x] - lo) / span;
                }
            }
        }
    }
    Tensor::from_vec(&[3, h, w], img).expect("montage shape")
}

/// Probability plane as 8-bit gray.
pub fn probability_gray(plane: &[f64]) -> Vec<u8> {
    plane.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}
