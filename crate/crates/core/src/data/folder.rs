use std::fs;
use std::path::Path;

use image::ImageFormat;

use super::{Dataset, Split};
use crate::error::{ensure, Error, Result};

/// Decodes a binary PPM (P6) into `(height, width, [3,H,W] bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format { path: path.to_path_buf(), reason: "missing P6 magic".into() });
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, interleaved_to_planar(img.as_raw(), h, w)))
}

pub fn write_ppm(path: &Path, height: usize, width: usize, planar: &[u8]) -> Result<()> {
    ensure!(planar.len() == 3 * height * width, "buffer does not hold a 3x{height}x{width} image");
    let plane = height * width;
    let mut raw = Vec::with_capacity(planar.len());
    for i in 0..plane {
        raw.extend([planar[i], planar[plane + i], planar[2 * plane + i]]);
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(&raw);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn interleaved_to_planar(raw: &[u8], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        out[i] = px[0];
        out[plane + i] = px[1];
        out[2 * plane + i] = px[2];
    }
    out
}

/// Nearest-neighbour resize of a `[C,H,W]` buffer; source row of output row
/// `y` is `floor(y·H / H')`, likewise for columns.
pub fn resize_nearest(data: &[u8], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    if (h, w) == (out_h, out_w) {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                out.push(data[(c * h + sy) * w + x * w / out_w]);
            }
        }
    }
    out
}

/// Loads the images listed in `manifest` (`relative/path.ppm,classname` per
/// line) relative to `root`, resizing each to `target = (height, width)`.
///
/// Class names get labels in order of first appearance unless `classes`
/// fixes the label set (used for a test split, which must share the
/// training labels).
pub fn load_image_folder(
    root: &Path,
    manifest: &Path,
    target: (usize, usize),
    classes: Option<&[String]>,
    split: Split,
) -> Result<Dataset> {
    let (th, tw) = target;
    ensure!(th >= 2 && tw >= 2 && th % 2 == 0 && tw % 2 == 0, "target size {th}x{tw} must be even");
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let fixed = classes.is_some();
    let mut ds = Dataset::empty(classes.map(<[String]>::to_vec).unwrap_or_default(), split, th, tw);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((rel, class)) = line.rsplit_once(',') else {
            return Err(Error::Format {
                path: manifest.to_path_buf(),
                reason: format!("line {} is not `path,class`", lineno + 1),
            });
        };
        let class = class.trim();
        let label = match ds.class_names.iter().position(|c| c == class) {
            Some(l) => l,
            None if !fixed => {
                ds.class_names.push(class.to_string());
                ds.class_names.len() - 1
            }
            None => {
                return Err(Error::Format {
                    path: manifest.to_path_buf(),
                    reason: format!("line {}: unknown class `{class}`", lineno + 1),
                })
            }
        };
        let (h, w, pixels) = read_ppm(&root.join(rel.trim()))?;
        ds.images.push(resize_nearest(&pixels, 3, h, w, th, tw));
        ds.class_labels.push(label);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_p6() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        // row-major RGB triples
        bytes.extend([10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120]);
        fs::write(&path, bytes).unwrap();
        let (h, w, px) = read_ppm(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(px, vec![10, 40, 70, 100, 20, 50, 80, 110, 30, 60, 90, 120]);
    }

    #[test]
    fn non_p6_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n1 1\n255\n\x07").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ppm");
        let px: Vec<u8> = (0..3 * 4 * 6).map(|v| (v * 5) as u8).collect();
        write_ppm(&path, 4, 6, &px).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), (4, 6, px));
    }

    #[test]
    fn nearest_resize() {
        let px = [1u8, 2, 3, 4];
        assert_eq!(resize_nearest(&px, 1, 2, 2, 4, 4), vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(resize_nearest(&resize_nearest(&px, 1, 2, 2, 4, 4), 1, 4, 4, 2, 2), px);
    }

    #[test]
    fn manifest_loading() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir(root.join("imgs")).unwrap();
        let px = vec![9u8; 3 * 3 * 5];
        write_ppm(&root.join("imgs/x.ppm"), 3, 5, &px).unwrap();
        fs::write(root.join("m.txt"), "imgs/x.ppm,oxide\nimgs/x.ppm,sphere\n\nimgs/x.ppm,oxide\n").unwrap();
        let ds = load_image_folder(root, &root.join("m.txt"), (4, 4), None, Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_names, vec!["oxide", "sphere"]);
        assert_eq!(ds.class_labels, vec![0, 1, 0]);
        assert!(ds.images.iter().all(|i| i.len() == 48 && i.iter().all(|&p| p == 9)));

        let known = vec!["sphere".to_string(), "oxide".to_string()];
        let test = load_image_folder(root, &root.join("m.txt"), (4, 4), Some(&known), Split::Test).unwrap();
        assert_eq!(test.class_labels, vec![1, 0, 1]);

        fs::write(root.join("empty.txt"), "").unwrap();
        assert!(load_image_folder(root, &root.join("empty.txt"), (4, 4), None, Split::Train).unwrap().is_empty());

        fs::write(root.join("missing.txt"), "imgs/nope.ppm,oxide\n").unwrap();
        let err = load_image_folder(root, &root.join("missing.txt"), (4, 4), None, Split::Train).unwrap_err();
        assert!(err.to_string().contains("nope.ppm"));
        assert!(load_image_folder(root, &root.join("m.txt"), (3, 4), None, Split::Train).is_err());
    }
}
