use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetManifest, SceneSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        message: message.into(),
    })
}

/// Parses a binary PNM header; returns `(width, height, payload offset)`.
fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return format_err(0, format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return format_err(pos, "truncated header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return format_err(start, format!("expected header field {}", i + 1));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format {
                offset: start,
                message: "header number out of range".into(),
            })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return format_err(pos, "expected single whitespace after maxval"),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return format_err(pos - 1, format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return format_err(pos - 1, "empty image");
    }
    Ok((w, h, pos))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize) -> Result<&'a [u8]> {
    match bytes.get(start..start + len) {
        Some(p) => Ok(p),
        None => format_err(bytes.len(), format!("truncated payload: expected {len} bytes from offset {start}")),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB `[3, H, W]` image with values in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for k in 0..3 {
            out.push(quantize(image.data()[k * plane + i]));
        }
    }
    Ok(fs::write(path, out)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = read_bytes(path)?;
    let (w, h, start) = parse_pnm_header(&bytes, b"P6")?;
    let px = payload(&bytes, start, 3 * w * h)?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks(3).enumerate() {
        for k in 0..3 {
            data[k * plane + i] = f64::from(rgb[k]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_gray_pgm(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} gray values for {height}x{width}",
            gray.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(fs::write(path, out)?)
}

/// Label map as PGM with gray value = class id.
pub fn write_label_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    labels.check_classes(256)?;
    let gray: Vec<u8> = labels.data.iter().map(|&l| l as u8).collect();
    write_gray_pgm(path, labels.height, labels.width, &gray)
}

pub fn read_label_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = read_bytes(path)?;
    let (w, h, start) = parse_pnm_header(&bytes, b"P5")?;
    let px = payload(&bytes, start, w * h)?;
    LabelMap::new(h, w, px.iter().map(|&g| usize::from(g)).collect())
}

const MAGIC: &[u8; 4] = b"DPTN";

/// Appends `"DPTN"`, u32 rank, u32 extents and little-endian f64 values.
pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f64>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = payload(bytes, at, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Decodes the tensor starting at `offset`; returns it with the offset just past it.
pub fn read_tensor(bytes: &[u8], offset: usize) -> Result<(Tensor<f64>, usize)> {
    if bytes.get(offset..offset + 4) != Some(MAGIC.as_slice()) {
        return format_err(offset, "missing DPTN magic");
    }
    let rank = read_u32(bytes, offset + 4)? as usize;
    if rank > 8 {
        return format_err(offset + 4, format!("implausible rank {rank}"));
    }
    let mut pos = offset + 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, pos)? as usize);
        pos += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or(Error::Format {
            offset: offset + 8,
            message: "extent product overflows".into(),
        })?;
    let raw = payload(bytes, pos, n * 8)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return format_err(pos + 8 * i, "non-finite value");
    }
    Ok((Tensor::from_vec(&shape, data)?, pos + n * 8))
}

pub fn write_tensor_file(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let mut out = Vec::new();
    write_tensor(&mut out, t);
    Ok(fs::write(path, out)?)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor<f64>> {
    let bytes = read_bytes(path)?;
    let (t, end) = read_tensor(&bytes, 0)?;
    if end != bytes.len() {
        return format_err(end, "trailing bytes after tensor");
    }
    Ok(t)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let text = format!(
        "class_names={}\nclass_counts={}\nsamples={}\nseed={}\nchannels={}\nheight={}\nwidth={}\n",
        m.class_names.join(","),
        join(&m.class_counts),
        m.samples,
        m.seed,
        m.channels,
        m.height,
        m.width
    );
    Ok(fs::write(path, text)?)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("manifest line {}: expected key=value", i + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("manifest missing {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Dataset(format!("manifest {k} is not a number")))
    };
    let class_counts = get("class_counts")?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Dataset(format!("bad class count {s:?}"))))
        .collect::<Result<Vec<u64>>>()?;
    let class_names: Vec<String> = get("class_names")?.split(',').map(str::to_string).collect();
    if class_names.len() != class_counts.len() {
        return Err(Error::Dataset("class_names and class_counts differ in length".into()));
    }
    Ok(DatasetManifest {
        class_names,
        class_counts,
        samples: num("samples")? as usize,
        seed: num("seed")?,
        channels: num("channels")? as usize,
        height: num("height")? as usize,
        width: num("width")? as usize,
    })
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// Writes `NNNNN.ppm`, `NNNNN.pgm`, the exact `NNNNN.dptn` image and `manifest.txt`.
pub fn save_split(dir: &Path, samples: &[SceneSample], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let base = dir.join(stem(i));
        if s.image.dims3()?.0 == 3 {
            write_ppm(&base.with_extension("ppm"), &s.image)?;
        }
        write_label_pgm(&base.with_extension("pgm"), &s.labels)?;
        write_tensor_file(&base.with_extension("dptn"), &s.image)?;
    }
    write_manifest(&dir.join("manifest.txt"), manifest)
}

/// Reads a split written by [`save_split`]; the float sidecar wins over the 8-bit PPM.
pub fn load_split(dir: &Path) -> Result<(Vec<SceneSample>, DatasetManifest)> {
    let manifest = read_manifest(&dir.join("manifest.txt"))?;
    let mut samples = Vec::with_capacity(manifest.samples);
    for i in 0..manifest.samples {
        let base: PathBuf = dir.join(stem(i));
        let sidecar = base.with_extension("dptn");
        let image = if sidecar.exists() {
            read_tensor_file(&sidecar)?
        } else {
            read_ppm(&base.with_extension("ppm"))?
        };
        let labels = read_label_pgm(&base.with_extension("pgm"))?;
        labels.check_classes(manifest.classes())?;
        samples.push(SceneSample::new(image, labels)?);
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_scenes;

    #[test]
    fn label_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        write_label_pgm(&p, &l).unwrap();
        assert_eq!(read_label_pgm(&p).unwrap(), l);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 3, 4, 255]);
    }

    #[test]
    fn ppm_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        let img = Tensor::from_f64(&[3, 1, 2], &[0.0, 1.0, 0.5, 0.25, 0.2, 0.9]).unwrap();
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P5\n1 1\n255\n\0").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { offset: 0, .. })));
        fs::write(&p, b"P6\n# comment\n2 x\n").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { offset: 15, .. })));
        fs::write(&p, b"P6\n2 1\n255\n\x01\x02\x03").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { offset: 14, .. })));
        fs::write(&p, b"P5\n2 1\n65535\n\0\0").unwrap();
        assert!(matches!(read_label_pgm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn tensor_sidecar_round_trip_and_errors() {
        let t = Tensor::from_f64(&[2, 1, 3], &[1.5, -2.0, 1e-300, 3.0, 0.0, -0.0]).unwrap();
        let mut b = Vec::new();
        write_tensor(&mut b, &t);
        write_tensor(&mut b, &Tensor::from_f64(&[1], &[7.0]).unwrap());
        let (a, next) = read_tensor(&b, 0).unwrap();
        assert_eq!(a, t);
        assert_eq!(next, 4 + 4 + 12 + 48);
        let (c, end) = read_tensor(&b, next).unwrap();
        assert_eq!((c.data()[0], end), (7.0, b.len()));
        assert!(matches!(read_tensor(b"DPTX", 0), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(read_tensor(&b[..30], 0), Err(Error::Format { offset: 30, .. })));
    }

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (s, m) = generate_synthetic_scenes(3, 4, 16, 2).unwrap();
        save_split(dir.path(), &s, &m).unwrap();
        let (back, mb) = load_split(dir.path()).unwrap();
        assert_eq!((back, mb), (s, m));
    }
}
