//! Frame-sequence grid images with burned-in timestamp markers.
//!
//! All pixel math is integer-only, so composites are identical across runs
//! and platforms.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsio::write_atomic;

pub const GLYPH_WIDTH: u32 = 5;
pub const GLYPH_HEIGHT: u32 = 7;
pub const GLYPH_ADVANCE: u32 = 6;
pub const LABEL_PADDING: u32 = 2;
pub const DEFAULT_FRAME_SIZE: (u32, u32) = (320, 180);

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("bad grid geometry: {0}")]
    BadGeometry(String),
    #[error("label {label:?} needs a {needed_w}x{needed_h} box, frame is {width}x{height}")]
    LabelTooLong { label: String, needed_w: u32, needed_h: u32, width: u32, height: u32 },
    #[error("no glyph for character {0:?}")]
    UnsupportedGlyph(char),
    #[error("expected {expected} frames, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("frame {index} is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    SizeMismatch { index: usize, expected_w: u32, expected_h: u32, actual_w: u32, actual_h: u32 },
    #[error("at least 2 frames required, got {0}")]
    TooFewFrames(usize),
    #[error("pixel buffer has {actual} bytes, {width}x{height} RGB8 needs {expected}")]
    BufferSize { width: u32, height: u32, expected: usize, actual: usize },
    #[error("ppm: {0}")]
    Ppm(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for FrameError {
    fn from(e: std::io::Error) -> Self {
        FrameError::Io(e.to_string())
    }
}

/// Packed RGB8, row-major, no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterFrame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterFrame {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        RasterFrame { width, height, pixels }
    }

    pub fn from_rgb8(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, FrameError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(FrameError::BufferSize { width, height, expected, actual: pixels.len() });
        }
        Ok(RasterFrame { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    fn fill_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, rgb: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    /// Copies `src` with its top-left corner at (`x0`, `y0`).
    fn blit(&mut self, src: &RasterFrame, x0: u32, y0: u32) {
        let row = src.width as usize * 3;
        for y in 0..src.height {
            let d = self.offset(x0, y0 + y);
            let s = src.offset(0, y);
            self.pixels[d..d + row].copy_from_slice(&src.pixels[s..s + row]);
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        self.write_ppm(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_ppm<R: Read>(reader: R) -> Result<Self, FrameError> {
        let mut r = BufReader::new(reader);
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            let token = next_header_token(&mut r)?.ok_or_else(|| FrameError::Ppm("truncated header".into()))?;
            fields.push(token);
        }
        if fields[0] != "P6" {
            return Err(FrameError::Ppm(format!("unsupported magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| FrameError::Ppm(format!("bad header number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(FrameError::Ppm(format!("maxval {maxval} unsupported, only 255")));
        }
        let mut pixels = Vec::new();
        r.read_to_end(&mut pixels)?;
        let expected = width as usize * height as usize * 3;
        if pixels.len() < expected {
            return Err(FrameError::Ppm(format!("expected {expected} pixel bytes, found {}", pixels.len())));
        }
        pixels.truncate(expected);
        RasterFrame::from_rgb8(width, height, pixels)
    }

    pub fn load_ppm(path: &Path) -> Result<Self, FrameError> {
        let f = std::fs::File::open(path).map_err(|e| FrameError::Io(format!("{}: {e}", path.display())))?;
        Self::read_ppm(f)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), FrameError> {
        write_atomic(path, &self.to_ppm_bytes())?;
        Ok(())
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments. The
/// single whitespace byte after the token is consumed.
fn next_header_token<R: BufRead>(r: &mut R) -> Result<Option<String>, FrameError> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok((!token.is_empty()).then(|| String::from_utf8_lossy(&token).into_owned()));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    return Ok(Some(String::from_utf8_lossy(&token).into_owned()));
                }
            }
            b => token.push(b),
        }
    }
}

/// Rows of a 5x7 glyph, bit 4 is the leftmost column.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        ' ' => [0x00; 7],
        _ => return None,
    })
}

/// Size of the black backing box for a label of `chars` characters.
pub fn label_box(chars: usize) -> (u32, u32) {
    let n = chars as u32;
    let text_w = if n == 0 { 0 } else { n * GLYPH_ADVANCE - 1 };
    (text_w + 2 * LABEL_PADDING, GLYPH_HEIGHT + 2 * LABEL_PADDING)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    #[default]
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Draws `label` in white on a black box anchored at `corner`. Pixels outside
/// the box are untouched.
pub fn burn_timestamp(mut frame: RasterFrame, label: &str, corner: Corner) -> Result<RasterFrame, FrameError> {
    let glyphs = label.chars().map(|c| glyph(c).ok_or(FrameError::UnsupportedGlyph(c))).collect::<Result<Vec<_>, _>>()?;
    let (bw, bh) = label_box(glyphs.len());
    if bw > frame.width || bh > frame.height {
        return Err(FrameError::LabelTooLong {
            label: label.to_string(),
            needed_w: bw,
            needed_h: bh,
            width: frame.width,
            height: frame.height,
        });
    }
    let x0 = match corner {
        Corner::TopLeft | Corner::BottomLeft => 0,
        Corner::TopRight | Corner::BottomRight => frame.width - bw,
    };
    let y0 = match corner {
        Corner::TopLeft | Corner::TopRight => 0,
        Corner::BottomLeft | Corner::BottomRight => frame.height - bh,
    };
    frame.fill_rect(x0, y0, bw, bh, BLACK);
    for (i, rows) in glyphs.iter().enumerate() {
        let gx = x0 + LABEL_PADDING + i as u32 * GLYPH_ADVANCE;
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..GLYPH_WIDTH {
                if bits & (0x10 >> dx) != 0 {
                    frame.set_pixel(gx + dx, y0 + LABEL_PADDING + dy as u32, WHITE);
                }
            }
        }
    }
    Ok(frame)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Seconds since the start: `"7"` at 1 fps, `"3.50"` otherwise.
    #[default]
    Timestamp,
    /// Zero-based frame index.
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub duration: f64,
    pub fps: f64,
    pub cols: u32,
    pub rows: u32,
    pub frame_width: u32,
    pub frame_height: u32,
    pub label_mode: LabelMode,
    pub labels: Vec<String>,
}

impl FramePlan {
    pub fn frame_count(&self) -> usize {
        self.labels.len()
    }

    pub fn composite_size(&self) -> (u32, u32) {
        (self.cols * self.frame_width, self.rows * self.frame_height)
    }

    /// Top-left pixel of cell `i`, row-major.
    pub fn cell_origin(&self, i: usize) -> (u32, u32) {
        let i = i as u32;
        ((i % self.cols) * self.frame_width, (i / self.cols) * self.frame_height)
    }

    /// Sampling time of frame `i` in seconds.
    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 / self.fps
    }
}

fn frame_label(i: usize, fps: f64, mode: LabelMode) -> String {
    match mode {
        LabelMode::Index => i.to_string(),
        LabelMode::Timestamp if fps == 1.0 => i.to_string(),
        LabelMode::Timestamp => format!("{:.2}", i as f64 / fps),
    }
}

/// Lays out `floor(duration * fps)` frames (at least one) in `cols` columns.
pub fn plan_grid(
    duration: f64,
    fps: f64,
    cols: u32,
    frame_size: (u32, u32),
    label_mode: LabelMode,
) -> Result<FramePlan, FrameError> {
    let bad = |m: String| Err(FrameError::BadGeometry(m));
    if !(duration.is_finite() && duration > 0.0) {
        return bad(format!("duration must be positive, got {duration}"));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return bad(format!("fps must be positive, got {fps}"));
    }
    if cols == 0 {
        return bad("cols must be at least 1".into());
    }
    let (w, h) = frame_size;
    if w == 0 || h == 0 {
        return bad(format!("frame size {w}x{h} is empty"));
    }
    // tolerate products like 0.29 * 100 = 28.999999999999996
    let exact = duration * fps;
    let count = (exact + 1e-9 * exact.max(1.0)).floor().max(1.0);
    if count > u32::MAX as f64 {
        return bad(format!("{count} frames is too many"));
    }
    let count = count as usize;
    let rows = count.div_ceil(cols as usize) as u32;
    if u64::from(cols) * u64::from(w) > u64::from(u32::MAX) || u64::from(rows) * u64::from(h) > u64::from(u32::MAX) {
        return bad("composite dimensions overflow".into());
    }
    let labels = (0..count).map(|i| frame_label(i, fps, label_mode)).collect();
    Ok(FramePlan { duration, fps, cols, rows, frame_width: w, frame_height: h, label_mode, labels })
}

/// Places each frame, with its marker burned in, into its cell. Unused cells
/// stay black.
pub fn compose_grid(frames: &[RasterFrame], plan: &FramePlan) -> Result<RasterFrame, FrameError> {
    if frames.len() != plan.frame_count() {
        return Err(FrameError::CountMismatch { expected: plan.frame_count(), actual: frames.len() });
    }
    for (index, f) in frames.iter().enumerate() {
        if (f.width, f.height) != (plan.frame_width, plan.frame_height) {
            return Err(FrameError::SizeMismatch {
                index,
                expected_w: plan.frame_width,
                expected_h: plan.frame_height,
                actual_w: f.width,
                actual_h: f.height,
            });
        }
    }
    let (w, h) = plan.composite_size();
    let mut out = RasterFrame::filled(w, h, BLACK);
    for (i, (frame, label)) in frames.iter().zip(&plan.labels).enumerate() {
        let burned = burn_timestamp(frame.clone(), label, Corner::TopLeft)?;
        let (x, y) = plan.cell_origin(i);
        out.blit(&burned, x, y);
    }
    Ok(out)
}

/// Mean over consecutive frame pairs of the mean absolute channel
/// difference, divided by 255.
pub fn motion_score(frames: &[RasterFrame]) -> Result<f64, FrameError> {
    if frames.len() < 2 {
        return Err(FrameError::TooFewFrames(frames.len()));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    for (index, f) in frames.iter().enumerate() {
        if (f.width, f.height) != (w, h) {
            return Err(FrameError::SizeMismatch { index, expected_w: w, expected_h: h, actual_w: f.width, actual_h: f.height });
        }
    }
    let channels = frames[0].pixels.len() as u128;
    if channels == 0 {
        return Ok(0.0);
    }
    let total: u128 = frames
        .windows(2)
        .map(|p| p[0].pixels.iter().zip(&p[1].pixels).map(|(&a, &b)| u128::from(a.abs_diff(b))).sum::<u128>())
        .sum();
    let pairs = (frames.len() - 1) as u128;
    Ok(total as f64 / (channels * pairs * 255) as f64)
}
