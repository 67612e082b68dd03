//! CIFAR-10-C array files and the internal dataset container.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::neural::Matrix;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";
const SEVERITIES: usize = 5;

fn ingest(path: &Path, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

struct NpyArray {
    descr: String,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

/// Value following `'key':` in a numpy header dict.
fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let at = header.find(&format!("'{key}'"))?;
    let rest = header[at + key.len() + 2..].trim_start().strip_prefix(':')?;
    Some(rest.trim_start())
}

fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| ingest(path, "file", e.to_string()))?;
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(ingest(path, "magic", "not an array container file"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(ingest(path, "version", format!("unsupported version {major}.{minor}")));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| ingest(path, "header_len", "header runs past end of file"))?;
    let header = std::str::from_utf8(header).map_err(|_| ingest(path, "header", "not ASCII"))?;

    let descr = header_value(header, "descr")
        .and_then(|v| v.strip_prefix('\''))
        .and_then(|v| v.split('\'').next())
        .ok_or_else(|| ingest(path, "descr", "missing"))?
        .to_string();
    let fortran = header_value(header, "fortran_order")
        .ok_or_else(|| ingest(path, "fortran_order", "missing"))?;
    if !fortran.starts_with("False") {
        return Err(ingest(path, "fortran_order", "only C order is supported"));
    }
    let shape_src = header_value(header, "shape")
        .and_then(|v| v.strip_prefix('('))
        .and_then(|v| v.split(')').next())
        .ok_or_else(|| ingest(path, "shape", "missing"))?;
    let shape = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| ingest(path, "shape", e.to_string()))?;
    if shape.is_empty() {
        return Err(ingest(path, "shape", "scalar arrays are not supported"));
    }
    Ok(NpyArray {
        descr,
        shape,
        payload: bytes[10 + hlen..].to_vec(),
    })
}

fn label_values(path: &Path, arr: &NpyArray) -> Result<Vec<usize>> {
    let n = arr.shape.iter().product::<usize>();
    let width = match arr.descr.as_str() {
        "|u1" | "<u1" => 1,
        "<i4" | "<u4" => 4,
        "<i8" | "<u8" => 8,
        other => return Err(ingest(path, "descr", format!("unsupported label dtype {other}"))),
    };
    if arr.payload.len() != n * width {
        return Err(ingest(path, "payload", format!("expected {} bytes", n * width)));
    }
    Ok(arr
        .payload
        .chunks_exact(width)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..width].copy_from_slice(c);
            u64::from_le_bytes(b) as usize
        })
        .collect())
}

/// Load one severity slice of a CIFAR-10-C corruption from `dir`, which
/// holds `<corruption>.npy` and `labels.npy`. Pixels are scaled to `[0,1]`
/// and each image flattened in stored (H, W, C) order.
pub fn load_cifar10c(dir: &Path, corruption: &str, severity: u8) -> Result<LabeledSet> {
    if !(1..=5).contains(&severity) {
        return Err(Error::config(format!("severity {severity} outside 1..=5")));
    }
    let img_path = dir.join(format!("{corruption}.npy"));
    let lbl_path = dir.join("labels.npy");
    let images = read_npy(&img_path)?;
    if images.descr != "|u1" && images.descr != "<u1" {
        return Err(ingest(
            &img_path,
            "descr",
            format!("expected uint8 pixels, got {}", images.descr),
        ));
    }
    let total = images.shape[0];
    let dims: usize = images.shape[1..].iter().product();
    if images.payload.len() != total * dims {
        return Err(ingest(
            &img_path,
            "payload",
            format!("expected {} bytes, got {}", total * dims, images.payload.len()),
        ));
    }
    if total % SEVERITIES != 0 || total == 0 {
        return Err(ingest(
            &img_path,
            "shape",
            format!("{total} rows do not split into {SEVERITIES} severities"),
        ));
    }
    let labels = label_values(&lbl_path, &read_npy(&lbl_path)?)?;
    if labels.len() != total {
        return Err(ingest(
            &lbl_path,
            "shape",
            format!("{} labels for {total} images", labels.len()),
        ));
    }
    let per = total / SEVERITIES;
    let rows = (usize::from(severity) - 1) * per..usize::from(severity) * per;
    let data = images.payload[rows.start * dims..rows.end * dims]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels = labels[rows].to_vec();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledSet::new(Matrix::from_vec(per, dims, data)?, labels, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct DatasetHeader {
    pub K: usize,
    pub D: usize,
    pub N: usize,
    pub seed: Option<u64>,
    pub corruption: Option<String>,
    pub severity: Option<u8>,
}

/// Internal container: `u32` header length, JSON header, little-endian `f64`
/// inputs, little-endian `u16` labels.
pub fn write_dataset(path: &Path, set: &LabeledSet, header: &DatasetHeader) -> Result<()> {
    if (header.K, header.D, header.N) != (set.classes(), set.dims(), set.len()) {
        return Err(Error::dim("dataset header does not describe the set"));
    }
    if set.classes() > usize::from(u16::MAX) + 1 {
        return Err(Error::config("too many classes for u16 labels"));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(4 + json.len() + set.len() * (set.dims() * 8 + 2));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in set.inputs().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in set.labels() {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&out)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(LabeledSet, DatasetHeader)> {
    let bytes = fs::read(path).map_err(|e| ingest(path, "file", e.to_string()))?;
    let hlen = bytes
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| ingest(path, "header_len", "file too short"))?;
    let header: DatasetHeader = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| ingest(path, "header", "truncated"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| ingest(path, "header", e.to_string())))?;
    let body = &bytes[4 + hlen..];
    let nx = header.N * header.D;
    if body.len() != nx * 8 + header.N * 2 {
        return Err(ingest(path, "payload", "length does not match header"));
    }
    let data = body[..nx * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = body[nx * 8..]
        .chunks_exact(2)
        .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    let set = LabeledSet::new(Matrix::from_vec(header.N, header.D, data)?, labels, header.K)?;
    Ok((set, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy(descr: &str, shape: &[usize], payload: &[u8]) -> Vec<u8> {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let shape = if dims.len() == 1 {
            format!("({},)", dims[0])
        } else {
            format!("({})", dims.join(", "))
        };
        let mut h = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
        while (10 + h.len() + 1) % 64 != 0 {
            h.push(' ');
        }
        h.push('\n');
        let mut out = NPY_MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(h.len() as u16).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    /// 5 severities x 10 images of 2x2x3, labels 0..9 per severity.
    fn fixture(dir: &Path) {
        let images: Vec<u8> = (0..50 * 12).map(|i| (i % 256) as u8).collect();
        fs::write(dir.join("fog.npy"), npy("|u1", &[50, 2, 2, 3], &images)).unwrap();
        let labels: Vec<u8> = (0..50).map(|i| (i % 10) as u8).collect();
        fs::write(dir.join("labels.npy"), npy("|u1", &[50], &labels)).unwrap();
    }

    #[test]
    fn severity_selects_row_block() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let s5 = load_cifar10c(dir.path(), "fog", 5).unwrap();
        assert_eq!((s5.len(), s5.dims()), (10, 12));
        assert_eq!(s5.inputs().get(0, 0), f64::from(((40 * 12) % 256) as u8) / 255.0);
        assert_eq!(s5.labels().len(), s5.inputs().rows());
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("bad.npy"), npy("<f4", &[50, 2, 2, 3], &[0; 2400])).unwrap();
        match load_cifar10c(dir.path(), "bad", 1) {
            Err(Error::Ingest { field, .. }) => assert_eq!(field, "descr"),
            other => panic!("{other:?}"),
        }
        match load_cifar10c(dir.path(), "missing", 1) {
            Err(Error::Ingest { field, .. }) => assert_eq!(field, "file"),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join("trunc.npy"), b"\x93NUMPY\x01\x00\xff\x00{").unwrap();
        match load_cifar10c(dir.path(), "trunc", 1) {
            Err(Error::Ingest { field, .. }) => assert_eq!(field, "header_len"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn internal_format_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let set = load_cifar10c(dir.path(), "fog", 2).unwrap();
        let header = DatasetHeader {
            K: set.classes(),
            D: set.dims(),
            N: set.len(),
            seed: None,
            corruption: Some("fog".into()),
            severity: Some(2),
        };
        let a = dir.path().join("a.ds");
        let b = dir.path().join("b.ds");
        write_dataset(&a, &set, &header).unwrap();
        let (back, h) = read_dataset(&a).unwrap();
        assert_eq!(back, set);
        write_dataset(&b, &back, &h).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
