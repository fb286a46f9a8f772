//! Per-frame category label maps: `labels/<seq>/<frame>.png` holding one
//! category id per pixel (palette-indexed or 8-bit grayscale), plus
//! `labels/vocab.txt` with `id<TAB>name` lines.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// `(height, width)` category ids.
pub type LabelMap = Array2<u8>;

pub type Vocabulary = Vec<(u8, String)>;

pub fn label_path(root: &Path, sequence_id: &str, frame: usize) -> PathBuf {
    root.join("labels").join(sequence_id).join(format!("{frame:06}.png"))
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let (id, name) = line.split_once('\t').ok_or_else(|| err("expected `id<TAB>name`"))?;
        let id = id.trim().parse::<u8>().map_err(|_| err("category id must be 0..=255"))?;
        out.push((id, name.trim().to_string()));
    }
    Ok(out)
}

pub fn write_vocabulary(path: &Path, vocab: &[(u8, String)]) -> Result<()> {
    let text: String = vocab.iter().map(|(id, name)| format!("{id}\t{name}\n")).collect();
    crate::util::atomic_write(path, text.as_bytes())
}

/// Reads raw category ids; palette entries are not expanded.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (c, d) => return Err(image_err(format!("label maps must be 8-bit indexed or grayscale, got {c:?}/{d:?}"))),
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    let mut out = LabelMap::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * frame.line_size..y * frame.line_size + w];
        out.row_mut(y).iter_mut().zip(row).for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}

/// Writes a palette-indexed PNG so the map is viewable as an image.
pub fn write_label_map(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dim();
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(BufWriter::new(&mut bytes), w as u32, h as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        let palette: Vec<u8> = (0..=255u8).flat_map(palette_colour).collect();
        encoder.set_palette(palette);
        let mut writer = encoder.write_header().map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let data: Vec<u8> = labels.iter().copied().collect();
        writer.write_image_data(&data).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    crate::util::atomic_write(path, &bytes)
}

fn palette_colour(id: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 5] = [[128, 64, 128], [244, 35, 232], [70, 70, 70], [153, 153, 153], [70, 130, 180]];
    match BASE.get(id as usize) {
        Some(c) => *c,
        None => {
            let h = (id as u32).wrapping_mul(2_654_435_761);
            [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
        }
    }
}

/// Nearest-neighbour resampling to `(height, width)`.
pub fn resample_nearest(labels: &LabelMap, (height, width): (usize, usize)) -> LabelMap {
    let (h, w) = labels.dim();
    LabelMap::from_shape_fn((height, width), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
        labels[[sy, sx]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let map = LabelMap::from_shape_fn((7, 11), |(y, x)| ((y * 11 + x) % 9) as u8);
        write_label_map(&p, &map).unwrap();
        assert_eq!(read_label_map(&p).unwrap(), map);
    }

    #[test]
    fn vocabulary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vec![(0, "road".to_string()), (7, "traffic sign".to_string())];
        write_vocabulary(&p, &v).unwrap();
        assert_eq!(read_vocabulary(&p).unwrap(), v);
    }

    #[test]
    fn nearest_resample_halves() {
        let map = LabelMap::from_shape_fn((4, 4), |(y, x)| (y / 2 * 2 + x / 2) as u8);
        let small = resample_nearest(&map, (2, 2));
        assert_eq!(small, ndarray::array![[0, 1], [2, 3]]);
        assert_eq!(resample_nearest(&small, (4, 4)), map);
    }
}
