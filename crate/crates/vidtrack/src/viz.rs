//! Trajectory overlays written as PNG frames.

use std::path::Path;

use image::{Rgb, RgbImage};
use vidtrack_core::Point2;

use crate::backbone::ForegroundMask;
use crate::error::{Error, Result};
use crate::media::{image_to_rgb8, FrameSequence, TrajectoryRecord};
use vidtrack_core::PatchGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VizOptions {
    pub radius: f64,
    /// Frames of history drawn behind each marker.
    pub trail: usize,
}

impl Default for VizOptions {
    fn default() -> Self {
        Self { radius: 3.0, trail: 8 }
    }
}

/// Well-separated colours from golden-ratio hue steps.
pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|k| {
            let h = (k as f64 * 0.618_033_988_75).fract() * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Filled disk when visible, one-pixel ring when occluded.
pub fn draw_marker(img: &mut RgbImage, p: Point2, radius: f64, visible: bool, c: [u8; 3]) {
    let r = radius.ceil() as i64 + 1;
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let hit = if visible { d <= radius } else { (d - radius).abs() <= 0.5 };
            if hit {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: Point2, b: Point2, c: [u8; 3]) {
    let steps = a.dist(b).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        put(img, (a.x + (b.x - a.x) * t).round() as i64, (a.y + (b.y - a.y) * t).round() as i64, c);
    }
}

/// Keeps queries whose query point lies on the foreground of its frame;
/// falls back to all queries, with a warning, when none does.
pub fn foreground_queries(records: &[TrajectoryRecord], masks: &[ForegroundMask], grid: &PatchGrid, seq: &FrameSequence) -> Vec<u32> {
    let mut all: Vec<u32> = records.iter().map(|r| r.query_id).collect();
    all.sort_unstable();
    all.dedup();
    let keep: Vec<u32> = all
        .iter()
        .copied()
        .filter(|&q| {
            records.iter().find(|r| r.query_id == q && r.frame == r.query_frame).is_some_and(|r| {
                let p = seq.to_working(Point2::new(r.x, r.y));
                masks.get(r.frame as usize).is_some_and(|m| m.get(grid.nearest_cell(p)))
            })
        })
        .collect();
    if keep.is_empty() {
        log::warn!("no query lies on the foreground; drawing all {} queries", all.len());
        return all;
    }
    keep
}

/// Draws `queries` (all when `None`) onto every frame and writes
/// `00000.png`, `00001.png`, ... into `dir`. Records are at original
/// resolution and are mapped to the working frames.
pub fn render_overlays(seq: &FrameSequence, records: &[TrajectoryRecord], queries: Option<&[u32]>, dir: &Path, opts: &VizOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids: Vec<u32> = records.iter().map(|r| r.query_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if let Some(q) = queries {
        ids.retain(|id| q.contains(id));
    }
    let colors = palette(ids.len());
    let mut tracks: Vec<Vec<Option<(Point2, bool)>>> = vec![vec![None; seq.len()]; ids.len()];
    for r in records {
        if let (Ok(k), true) = (ids.binary_search(&r.query_id), (r.frame as usize) < seq.len()) {
            tracks[k][r.frame as usize] = Some((seq.to_working(Point2::new(r.x, r.y)), r.visible));
        }
    }
    for (t, frame) in seq.frames.iter().enumerate() {
        let mut img = image_to_rgb8(frame);
        for (k, track) in tracks.iter().enumerate() {
            let lo = t.saturating_sub(opts.trail);
            for w in (lo..=t).collect::<Vec<_>>().windows(2) {
                if let (Some((a, true)), Some((b, true))) = (track[w[0]], track[w[1]]) {
                    draw_line(&mut img, a, b, colors[k]);
                }
            }
            if let Some((p, vis)) = track[t] {
                draw_marker(&mut img, p, opts.radius, vis, colors[k]);
            }
        }
        let path = dir.join(format!("{t:05}.png"));
        img.save(&path).map_err(|e| Error::Decode { path: path.clone(), msg: e.to_string() })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidtrack_core::Image;

    #[test]
    fn palette_colours_are_distinct() {
        let p = palette(12);
        for a in 0..12 {
            for b in a + 1..12 {
                assert_ne!(p[a], p[b]);
            }
        }
    }

    #[test]
    fn visible_markers_are_filled_and_occluded_hollow() {
        let mut img = RgbImage::new(20, 20);
        draw_marker(&mut img, Point2::new(5.0, 5.0), 3.0, true, [255, 0, 0]);
        draw_marker(&mut img, Point2::new(14.0, 14.0), 3.0, false, [0, 255, 0]);
        assert_eq!(img.get_pixel(5, 5).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(14, 14).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(17, 14).0, [0, 255, 0]);
    }

    #[test]
    fn overlays_cover_every_frame() {
        let f = Image::filled(16, 16, &[0.2, 0.2, 0.2]);
        let seq = FrameSequence::new(vec![f.clone(), f], "v", (32, 32)).unwrap();
        let recs: Vec<TrajectoryRecord> = (0..2)
            .map(|t| TrajectoryRecord { query_id: 0, query_frame: 0, frame: t, x: 10.0, y: 10.0, visible: t == 0, similarity: 1.0 })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        render_overlays(&seq, &recs, None, dir.path(), &VizOptions::default()).unwrap();
        let a = image::open(dir.path().join("00000.png")).unwrap().into_rgb8();
        assert_ne!(a.get_pixel(5, 5).0, [51, 51, 51]);
        assert!(dir.path().join("00001.png").exists());
    }
}
