//! On-disk formats: dataset directories, network checkpoints, results logs.
//!
//! Datasets are a `manifest.json` plus one binary PGM (P5) file per image
//! channel. Checkpoints are a text header line, a one-line JSON manifest and
//! then little-endian tensor records closed by an `KPTEND` trailer. Results
//! are JSON lines, one record per epoch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Provenance, Sample};
use crate::hourglass::{HourglassArch, StackedHourglassNet};
use crate::imaging;
use crate::keypoints::{JointId, Keypoint, PoseAnnotation};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const CHECKPOINT_MAGIC: &str = "KPTCKPT";
const TRAILER: &[u8] = b"KPTEND\n";

#[derive(Serialize, Deserialize)]
struct JointRecord {
    id: JointId,
    x: f64,
    y: f64,
    visible: bool,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    /// Channel files are `{image_path}.r.pgm`, `.g.pgm`, `.b.pgm`.
    image_path: String,
    image_id: String,
    joints: Vec<JointRecord>,
    head_len: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    resolution: usize,
    count: usize,
    provenance: Provenance,
    samples: Vec<SampleRecord>,
}

const CHANNELS: [&str; 3] = ["r", "g", "b"];

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn encode_pgm(plane: &[f32], res: usize) -> Vec<u8> {
    let mut out = format!("P5\n{res} {res}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| imaging::to_u8(v)));
    out
}

fn decode_pgm(path: &Path, res: usize) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let header = format!("P5\n{res} {res}\n255\n");
    let body = bytes
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| DataError::format(path, format!("expected a {res}x{res} 8-bit P5 graymap")))?;
    if body.len() != res * res {
        return Err(DataError::format(
            path,
            format!("expected {} pixel bytes, found {}", res * res, body.len()),
        ));
    }
    Ok(body.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// Writes `dir/manifest.json` and `dir/images/*.pgm`. Image values are
/// stored at 8-bit precision; quantized images round-trip exactly.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let res = dataset.resolution();
    let plane = res * res;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let stem = format!("images/{i:06}");
        for (ch, tag) in CHANNELS.iter().enumerate() {
            let data = &s.image.data()[ch * plane..(ch + 1) * plane];
            write_file(&dir.join(format!("{stem}.{tag}.pgm")), &encode_pgm(data, res))?;
        }
        records.push(SampleRecord {
            image_path: stem,
            image_id: s.annotation.image_id.clone(),
            joints: JointId::ALL
                .iter()
                .map(|&id| {
                    let k = s.annotation.joint(id);
                    JointRecord {
                        id,
                        x: k.x,
                        y: k.y,
                        visible: k.visible,
                    }
                })
                .collect(),
            head_len: s.annotation.head_len,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        resolution: res,
        count: dataset.len(),
        provenance: dataset.provenance().clone(),
        samples: records,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::format(&path, e.to_string()))?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(DataError::Version {
            path,
            found,
            expected: DATASET_VERSION,
        });
    }
    let m: DatasetManifest = serde_json::from_value(probe).map_err(|e| DataError::format(&path, e.to_string()))?;
    if m.count != m.samples.len() {
        return Err(DataError::format(
            &path,
            format!("count says {} but {} samples are listed", m.count, m.samples.len()),
        ));
    }
    let res = m.resolution;
    let mut samples = Vec::with_capacity(m.count);
    for (i, rec) in m.samples.into_iter().enumerate() {
        let mut data = Vec::with_capacity(3 * res * res);
        for tag in CHANNELS {
            data.extend(decode_pgm(&dir.join(format!("{}.{tag}.pgm", rec.image_path)), res)?);
        }
        let mut joints = [Keypoint::HIDDEN; 16];
        let mut seen = [false; 16];
        for j in &rec.joints {
            joints[j.id.code()] = Keypoint {
                x: j.x,
                y: j.y,
                visible: j.visible,
            };
            seen[j.id.code()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::format(
                &path,
                format!("sample {i} lacks joint `{}`", JointId::ALL[missing]),
            ));
        }
        samples.push(Arc::new(Sample {
            image: Tensor::new(vec![3, res, res], data).expect("image shape"),
            annotation: PoseAnnotation {
                joints,
                head_len: rec.head_len,
                image_id: rec.image_id,
            },
        }));
    }
    Dataset::new(samples, res, m.provenance)
}

/// A network plus free-form metadata (experiment descriptor, epoch, metric).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: StackedHourglassNet<f32>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    arch: HourglassArch,
    head_channels: Vec<usize>,
    params: Vec<String>,
    buffers: Vec<String>,
    metadata: serde_json::Value,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let net = &ckpt.net;
    let manifest = CheckpointManifest {
        arch: net.arch().clone(),
        head_channels: net.head_channels().to_vec(),
        params: net.params().keys().cloned().collect(),
        buffers: net.buffers().keys().cloned().collect(),
        metadata: ckpt.metadata.clone(),
    };
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").into_bytes();
    out.extend(
        serde_json::to_string(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    );
    out.push(b'\n');
    for (name, t) in net.params().iter().chain(net.buffers()) {
        put_tensor(&mut out, name, t);
    }
    out.extend(TRAILER);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint in place
    let tmp = path.with_extension("partial");
    write_file(&tmp, &out)?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                record: record.into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self, record: &str) -> Result<&'a str, DataError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DataError::Truncated {
                path: self.path.to_path_buf(),
                record: record.into(),
            })?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| DataError::format(self.path, format!("{record} is not UTF-8")))
    }

    fn u32(&mut self, record: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &str) -> Result<Tensor<f32>, DataError> {
        let name_len = self.u32(expected)? as usize;
        let name = self.take(name_len, expected)?;
        if name != expected.as_bytes() {
            return Err(DataError::format(
                self.path,
                format!(
                    "expected record `{expected}`, found `{}`",
                    String::from_utf8_lossy(name)
                ),
            ));
        }
        let ndim = self.u32(expected)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(self.take(8, expected)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.saturating_mul(4), expected)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| DataError::format(self.path, format!("record `{expected}`: {e}")))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let header = r.line("header")?;
    let found = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| DataError::format(path, "not a checkpoint file"))?;
    if found != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let m: CheckpointManifest =
        serde_json::from_str(r.line("manifest")?).map_err(|e| DataError::format(path, e.to_string()))?;
    let mut params = BTreeMap::new();
    for name in &m.params {
        params.insert(name.clone(), r.tensor(name)?);
    }
    let mut buffers = BTreeMap::new();
    for name in &m.buffers {
        buffers.insert(name.clone(), r.tensor(name)?);
    }
    let tail = &bytes[r.pos..];
    if tail != TRAILER {
        return Err(if TRAILER.starts_with(tail) {
            DataError::Truncated {
                path: path.to_path_buf(),
                record: "trailer".into(),
            }
        } else {
            DataError::format(path, "unexpected bytes after the last record")
        });
    }
    let net = StackedHourglassNet::from_parts(m.arch, m.head_channels, params, buffers)
        .map_err(|e| DataError::format(path, e.to_string()))?;
    Ok(Checkpoint {
        net,
        metadata: m.metadata,
    })
}

/// One line of a results log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub epoch: usize,
    pub split_tag: String,
    pub mode: String,
    pub metrics: BTreeMap<String, f64>,
    pub learning_rate: f64,
    /// Seconds since the run started; absent unless timing was requested,
    /// which keeps logs of identical runs byte-identical.
    pub wall_time: Option<f64>,
}

pub fn append_results(path: impl AsRef<Path>, record: &ResultRecord) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DataError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            record: format!("line {}", text.lines().count()),
        });
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DataError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Path of the results log inside a run directory.
pub fn results_path(run_dir: &Path) -> PathBuf {
    run_dir.join("results.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic;
    use crate::hourglass::HourglassArch;

    #[test]
    fn dataset_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(4, 6, 16).unwrap();
        save_dataset(&ds, tmp.path()).unwrap();
        let back = load_dataset(tmp.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let tmp = tempfile::tempdir().unwrap();
        let net = StackedHourglassNet::<f32>::build(&HourglassArch::desk(2, 8), 3).unwrap();
        let ck = Checkpoint {
            net,
            metadata: serde_json::json!({"epoch": 2}),
        };
        let p = tmp.path().join("a.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&p) {
            Err(DataError::Truncated { record, .. }) => assert!(!record.is_empty()),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_names_both() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("v.ckpt");
        fs::write(&p, b"KPTCKPT 9\n{}\n").unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn results_append_and_read() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.jsonl");
        let rec = ResultRecord {
            run_id: "r".into(),
            epoch: 1,
            split_tag: "d".into(),
            mode: "random_init".into(),
            metrics: [("val_pck".to_string(), 12.5)].into(),
            learning_rate: 2.5e-4,
            wall_time: None,
        };
        append_results(&p, &rec).unwrap();
        append_results(&p, &rec).unwrap();
        assert_eq!(read_results(&p).unwrap(), vec![rec.clone(), rec]);
    }
}
