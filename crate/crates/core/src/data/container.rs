//! On-disk dataset formats.
//!
//! `DCPD` container, little-endian:
//!
//! ```text
//! magic  "DCPD"            4 bytes
//! count  u32               number of images
//! height u16, width u16
//! channels u8              1, 3 or 4
//! pixels count × H × W × C bytes, row-major, interleaved
//! ```
//!
//! Labels sit in a sidecar CSV with rows `index,label` (header optional).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCPD";
const HEADER_LEN: usize = 4 + 4 + 2 + 2 + 1;

pub fn read_container(path: &Path) -> Result<Vec<Image>> {
    let bytes = fs::read(path).map_err(|e| Error::ingest(path, "open", e.to_string()))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::ingest(
            path,
            format!("offset {}", bytes.len()),
            "truncated header",
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::ingest(path, "offset 0", "bad magic, expected DCPD"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let c = bytes[12] as usize;
    if !matches!(c, 1 | 3 | 4) {
        return Err(Error::ingest(path, "offset 12", format!("unsupported channel count {c}")));
    }
    if count > 0 && (h == 0 || w == 0) {
        return Err(Error::ingest(path, "offset 8", "zero image dimension"));
    }
    let per = h * w * c;
    let expected = HEADER_LEN + count * per;
    if bytes.len() != expected {
        return Err(Error::ingest(
            path,
            format!("offset {}", bytes.len().min(expected)),
            format!(
                "{count} images of {h}x{w}x{c} declared: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    bytes[HEADER_LEN..]
        .chunks(per.max(1))
        .take(count)
        .map(|raw| Image::from_channels(h, w, c, raw))
        .collect()
}

/// Writes RGB images of a common size, plus `index,label` rows next to the
/// container when labels are given.
pub fn write_container(path: &Path, images: &[Image], labels: Option<&[usize]>) -> Result<()> {
    let (h, w) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::contract("container images must share one size"));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize || images.len() > u32::MAX as usize {
        return Err(Error::contract("container dimensions exceed format limits"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + images.len() * h * w * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(3);
    for img in images {
        out.extend_from_slice(&img.pixels);
    }
    fs::write(path, out)?;
    if let Some(labels) = labels {
        let mut f = fs::File::create(path.with_extension("csv"))?;
        writeln!(f, "index,label")?;
        for (i, l) in labels.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
    }
    Ok(())
}

fn data_rows(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .filter(|(i, l)| !(*i == 1 && l.chars().next().is_some_and(|c| c.is_alphabetic())))
}

pub(super) fn read_index_labels(path: &Path, count: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, "open", e.to_string()))?;
    let mut labels: Vec<Option<usize>> = vec![None; count];
    for (row, line) in data_rows(&text) {
        let mut parts = line.split(',');
        let (Some(i), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::ingest(path, format!("row {row}"), "expected `index,label`"));
        };
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| Error::ingest(path, format!("row {row}"), format!("bad index {i:?}")))?;
        let l: usize = l
            .trim()
            .parse()
            .map_err(|_| Error::ingest(path, format!("row {row}"), format!("bad label {l:?}")))?;
        if i >= count {
            return Err(Error::ingest(
                path,
                format!("row {row}"),
                format!("index {i} beyond {count} images"),
            ));
        }
        if labels[i].replace(l).is_some() {
            return Err(Error::ingest(path, format!("row {row}"), format!("duplicate index {i}")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::ingest(path, format!("index {i}"), "missing label row")))
        .collect()
}

pub(super) fn read_png_dir(dir: &Path, labels: Option<&Path>) -> Result<(Vec<Image>, Vec<usize>)> {
    let csv = labels.map(Path::to_path_buf).unwrap_or_else(|| dir.join("labels.csv"));
    let text = fs::read_to_string(&csv)
        .map_err(|e| Error::ingest(&csv, "open", e.to_string()))?;
    let mut images = Vec::new();
    let mut out = Vec::new();
    for (row, line) in data_rows(&text) {
        let Some((file, label)) = line.rsplit_once(',') else {
            return Err(Error::ingest(&csv, format!("row {row}"), "expected `filename,label`"));
        };
        let label: usize = label.trim().parse().map_err(|_| {
            Error::ingest(&csv, format!("row {row}"), format!("bad label {label:?}"))
        })?;
        let path = dir.join(file.trim());
        let decoded = image::open(&path)
            .map_err(|e| Error::ingest(&csv, format!("row {row}"), format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        images.push(Image::new(h as usize, w as usize, decoded.into_raw())?);
        out.push(label);
    }
    Ok((images, out))
}

/// Writes each image as `NNNNN.png` plus a `labels.csv` listing.
pub fn write_png_dir(dir: &Path, images: &[Image], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::contract("one label per image required"));
    }
    fs::create_dir_all(dir)?;
    let mut csv = fs::File::create(dir.join("labels.csv"))?;
    writeln!(csv, "filename,label")?;
    for (i, (img, l)) in images.iter().zip(labels).enumerate() {
        let name = format!("{i:05}.png");
        image::save_buffer(
            dir.join(&name),
            &img.pixels,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(csv, "{name},{l}")?;
    }
    Ok(())
}
