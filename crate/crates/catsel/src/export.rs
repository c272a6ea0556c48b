//! Channel-weight tables and heat-map images.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use catsel_core::rollout::{channel_scores, ChannelWeightMatrix};

use crate::error::{Error, Result};

/// Sample-wise average of weight matrices with identical layout.
pub fn mean_weights(ws: &[ChannelWeightMatrix]) -> Result<ChannelWeightMatrix> {
    let first = ws.first().ok_or_else(|| Error::Config("no weight matrices to average".into()))?;
    let mut acc = vec![0.0; first.w_eff.len()];
    for w in ws {
        if (w.n_cat, w.heads, w.channels) != (first.n_cat, first.heads, first.channels) {
            return Err(Error::Config("weight matrices differ in layout".into()));
        }
        acc.iter_mut().zip(&w.w_eff).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= ws.len() as f64);
    Ok(ChannelWeightMatrix { w_eff: acc, ..first.clone() })
}

/// One row per channel: `channel_id, s, cat{i}_head{h}...`, pairs ordered CAT-major.
///
/// `channel_ids` maps row positions to the ids written in the first column.
pub fn weight_table(w: &ChannelWeightMatrix, scores: &[f64], channel_ids: &[usize], snapshot: &str) -> Result<String> {
    if scores.len() != w.channels || channel_ids.len() != w.channels {
        return Err(Error::Config(format!("{} channels but {} scores / {} ids", w.channels, scores.len(), channel_ids.len())));
    }
    let mut out = String::new();
    for line in snapshot.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("channel_id,s");
    for cat in 0..w.n_cat {
        for h in 0..w.heads {
            out.push_str(&format!(",cat{cat}_head{h}"));
        }
    }
    out.push('\n');
    for c in 0..w.channels {
        out.push_str(&format!("{},{}", channel_ids[c], scores[c]));
        for p in 0..w.pairs() {
            out.push_str(&format!(",{}", w.row(p)[c]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Scores recomputed from a single (already averaged) matrix.
pub fn scores_of(w: &ChannelWeightMatrix) -> Result<Vec<f64>> {
    Ok(channel_scores(std::slice::from_ref(w))?.s)
}

/// Grayscale PNG of a row-major `rows x cols` grid, brightest at the maximum,
/// each cell drawn as a `cell x cell` block. The snapshot goes into a text chunk.
pub fn write_heatmap(path: &Path, values: &[f64], rows: usize, cols: usize, cell: usize, snapshot: &str) -> Result<()> {
    if values.len() != rows * cols || rows == 0 || cols == 0 || cell == 0 {
        return Err(Error::Config(format!("heat map of {rows}x{cols} cells from {} values", values.len())));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let (w, h) = (cols * cell, rows * cell);
    let mut pixels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * cols + x / cell].max(0.0);
            pixels[y * w + x] = (v * scale).round().min(255.0) as u8;
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Io { path: path.into(), source: std::io::Error::other(e.to_string()) };
    enc.add_text_chunk("config".into(), snapshot.into()).map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Heat map of `W` with channels as rows and (CAT, head) pairs as columns.
pub fn write_weight_heatmap(path: &Path, w: &ChannelWeightMatrix, snapshot: &str) -> Result<()> {
    let by_channel = w.channel_major();
    write_heatmap(path, by_channel.data(), w.channels, w.pairs(), 8, snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ChannelWeightMatrix {
        // 2 CATs x 1 head over 3 channels.
        ChannelWeightMatrix { n_cat: 2, heads: 1, channels: 3, w_eff: vec![0.5, 0.25, 0.25, 0.0, 0.0, 1.0] }
    }

    #[test]
    fn table_layout() {
        let w = sample();
        let s = scores_of(&w).unwrap();
        let t = weight_table(&w, &s, &[4, 7, 9], "a = 1").unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "# a = 1");
        assert_eq!(lines[1], "channel_id,s,cat0_head0,cat1_head0");
        assert_eq!(lines[2], "4,0.25,0.5,0");
        assert_eq!(lines[4], "9,0.625,0.25,1");
    }

    #[test]
    fn average_is_elementwise() {
        let a = sample();
        let b = ChannelWeightMatrix { w_eff: vec![0.5, 0.5, 0.0, 1.0, 0.0, 0.0], ..a.clone() };
        let m = mean_weights(&[a, b]).unwrap();
        assert_eq!(m.w_eff, vec![0.5, 0.375, 0.125, 0.5, 0.0, 0.5]);
    }
}
