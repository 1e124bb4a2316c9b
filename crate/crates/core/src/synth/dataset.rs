//! On-disk corpus layout:
//!
//! ```text
//! root/splits.json
//! root/<take>/cameras.json
//! root/<take>/frames/<idx:06>_<view>.png
//! root/<take>/points/<idx:06>.ply
//! root/<take>/graphs/<idx:06>.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_clip, ClipSpec, FrameSample, SynthError};
use crate::camera::CameraModel;
use crate::graph;
use crate::pointtemp::PointFrame;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    Missing(String),
    #[error("integrity error in frame {frame} ({path}): {message}")]
    Integrity { path: String, frame: u64, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("take {take} has {frames} frames, fewer than the window length {l}")]
    ClipTooShort { take: String, frames: usize, l: usize },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<String, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.display().to_string()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<(), DatasetError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// ASCII PLY with `x y z` (6 decimals) and `red green blue` bytes per vertex.
pub fn write_ply(path: &Path, pts: &PointFrame) -> Result<(), DatasetError> {
    let mut s = String::with_capacity(pts.len() * 40 + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", pts.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, a) in pts.xyz.iter().zip(&pts.attrs) {
        let c = |i: usize| (a.get(i).copied().unwrap_or(0.0) * 255.0).round().clamp(0.0, 255.0) as u8;
        let f = |v: f64| if v == 0.0 { 0.0 } else { v };
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {} {} {}", f(p[0]), f(p[1]), f(p[2]), c(0), c(1), c(2));
    }
    write(path, &s)
}

pub fn read_ply(path: &Path) -> Result<PointFrame, DatasetError> {
    let text = read(path)?;
    let bad = |line: usize, m: &str| DatasetError::Format {
        path: path.display().to_string(),
        message: format!("line {line}: {m}"),
    };
    let mut lines = text.lines().enumerate();
    let mut count = None;
    for (i, l) in lines.by_ref() {
        if i == 0 && l != "ply" {
            return Err(bad(1, "not a PLY file"));
        }
        if let Some(n) = l.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad(i + 1, "invalid vertex count"))?);
        }
        if l == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad(1, "missing vertex count"))?;
    let mut out = PointFrame::default();
    for (i, l) in lines.take(count) {
        let v: Vec<&str> = l.split_whitespace().collect();
        if v.len() < 6 {
            return Err(bad(i + 1, "expected x y z r g b"));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "invalid coordinate"));
        let c = |s: &str| s.parse::<u8>().map(|x| x as f64 / 255.0).map_err(|_| bad(i + 1, "invalid colour"));
        out.xyz.push([f(v[0])?, f(v[1])?, f(v[2])?]);
        out.attrs.push(vec![c(v[3])?, c(v[4])?, c(v[5])?]);
    }
    if out.len() != count {
        return Err(bad(count, &format!("expected {count} vertices, found {}", out.len())));
    }
    Ok(out)
}

fn frame_stem(idx: u64) -> String {
    format!("{idx:06}")
}

/// Writes the frames of one take under `dir`.
pub fn write_take(dir: &Path, frames: &[FrameSample]) -> Result<(), DatasetError> {
    for sub in ["frames", "points", "graphs"] {
        mkdir(&dir.join(sub))?;
    }
    if let Some(f) = frames.first() {
        let cams = serde_json::to_string_pretty(&f.cameras).expect("camera serialisation");
        write(&dir.join("cameras.json"), &cams)?;
    }
    for f in frames {
        let stem = frame_stem(f.frame_index);
        for (view, img) in &f.images {
            let p = dir.join("frames").join(format!("{stem}_{view}.png"));
            img.save(&p).map_err(|e| DatasetError::Format {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
        }
        write_ply(&dir.join("points").join(format!("{stem}.ply")), &f.points)?;
        write(&dir.join("graphs").join(format!("{stem}.json")), &graph::serialize(&f.graph))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TakeSpec {
    pub name: String,
    pub spec: ClipSpec,
}

/// Input of `synth-or generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub takes: Vec<TakeSpec>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl CorpusSpec {
    /// `n` takes derived from `base` with seeds `base.seed + k`; the last take is the validation split.
    pub fn uniform(base: &ClipSpec, n: usize) -> Self {
        let takes: Vec<TakeSpec> = (0..n)
            .map(|k| TakeSpec {
                name: format!("take_{}", k + 1),
                spec: ClipSpec {
                    seed: base.seed + k as u64,
                    ..base.clone()
                },
            })
            .collect();
        let names: Vec<String> = takes.iter().map(|t| t.name.clone()).collect();
        let mut splits = BTreeMap::new();
        if n > 1 {
            splits.insert("train".to_string(), names[..n - 1].to_vec());
            splits.insert("val".to_string(), names[n - 1..].to_vec());
        } else {
            splits.insert("train".to_string(), names.clone());
            splits.insert("val".to_string(), names);
        }
        Self { takes, splits }
    }
}

pub fn write_corpus(root: &Path, corpus: &CorpusSpec) -> Result<(), DatasetError> {
    mkdir(root)?;
    for t in &corpus.takes {
        let frames = generate_clip(&t.spec)?;
        write_take(&root.join(&t.name), &frames)?;
    }
    let splits = serde_json::to_string_pretty(&corpus.splits).expect("split serialisation");
    write(&root.join("splits.json"), &splits)
}

/// Index of one take on disk.
#[derive(Clone, Debug)]
pub struct TakeIndex {
    pub name: String,
    pub dir: PathBuf,
    pub frames: Vec<u64>,
    pub cameras: BTreeMap<String, CameraModel>,
}

impl TakeIndex {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let cam_path = dir.join("cameras.json");
        let cameras: BTreeMap<String, CameraModel> =
            serde_json::from_str(&read(&cam_path)?).map_err(|e| DatasetError::Format {
                path: cam_path.display().to_string(),
                message: e.to_string(),
            })?;
        for c in cameras.values() {
            c.validate().map_err(|e| DatasetError::Format {
                path: cam_path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        let gdir = dir.join("graphs");
        if !gdir.is_dir() {
            return Err(DatasetError::Missing(gdir.display().to_string()));
        }
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(&gdir).map_err(io_err(&gdir))? {
            let entry = entry.map_err(io_err(&gdir))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(stem) = name.strip_suffix(".json") {
                let idx = stem.parse::<u64>().map_err(|_| DatasetError::Format {
                    path: entry.path().display().to_string(),
                    message: "graph file name is not a frame index".into(),
                })?;
                frames.push(idx);
            }
        }
        frames.sort_unstable();
        let take = Self {
            name: dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default(),
            dir: dir.to_path_buf(),
            frames,
            cameras,
        };
        for &f in &take.frames {
            for p in take.frame_files(f) {
                if !p.exists() {
                    return Err(DatasetError::Missing(p.display().to_string()));
                }
            }
        }
        Ok(take)
    }

    fn frame_files(&self, idx: u64) -> Vec<PathBuf> {
        let stem = frame_stem(idx);
        let mut v: Vec<PathBuf> = self
            .cameras
            .keys()
            .map(|view| self.dir.join("frames").join(format!("{stem}_{view}.png")))
            .collect();
        v.push(self.dir.join("points").join(format!("{stem}.ply")));
        v.push(self.dir.join("graphs").join(format!("{stem}.json")));
        v
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads the frame at position `pos` of this take.
    pub fn load_frame(&self, pos: usize) -> Result<FrameSample, DatasetError> {
        let idx = self.frames[pos];
        let stem = frame_stem(idx);
        let gpath = self.dir.join("graphs").join(format!("{stem}.json"));
        let graph = graph::parse(&read(&gpath)?).map_err(|e| DatasetError::Integrity {
            path: gpath.display().to_string(),
            frame: idx,
            message: e.to_string(),
        })?;
        if graph.frame_index() != idx {
            return Err(DatasetError::Integrity {
                path: gpath.display().to_string(),
                frame: idx,
                message: format!("graph declares frame {} but file is for frame {idx}", graph.frame_index()),
            });
        }
        let mut images = BTreeMap::new();
        for (view, cam) in &self.cameras {
            let p = self.dir.join("frames").join(format!("{stem}_{view}.png"));
            if !p.exists() {
                return Err(DatasetError::Missing(p.display().to_string()));
            }
            let img = image::open(&p)
                .map_err(|e| DatasetError::Format {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let (h, w) = cam.image_size;
            if img.dimensions() != (w as u32, h as u32) {
                return Err(DatasetError::Integrity {
                    path: p.display().to_string(),
                    frame: idx,
                    message: format!("image is {:?}, camera expects {w}x{h}", img.dimensions()),
                });
            }
            images.insert(view.clone(), img);
        }
        let points = read_ply(&self.dir.join("points").join(format!("{stem}.ply")))?;
        Ok(FrameSample {
            frame_index: idx,
            images,
            points,
            cameras: self.cameras.clone(),
            graph,
        })
    }

    pub fn load_all(&self) -> Result<Vec<FrameSample>, DatasetError> {
        (0..self.len()).map(|i| self.load_frame(i)).collect()
    }
}

/// A corpus root with its split manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let sp = root.join("splits.json");
        let splits = serde_json::from_str(&read(&sp)?).map_err(|e| DatasetError::Format {
            path: sp.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            splits,
        })
    }

    pub fn takes(&self, split: &str) -> Result<Vec<TakeIndex>, DatasetError> {
        let names = self
            .splits
            .get(split)
            .ok_or_else(|| DatasetError::UnknownSplit(split.to_string()))?;
        names.iter().map(|n| TakeIndex::open(&self.root.join(n))).collect()
    }
}

/// Frame positions of each `l`-frame window over `n` frames.
///
/// Without padding there are `n - l + 1` windows. With padding every frame ends
/// one window, the first `l - 1` windows repeating frame 0 on the left.
pub fn sliding_windows(n: usize, l: usize, padded: bool) -> Vec<Vec<usize>> {
    if l == 0 || n == 0 {
        return vec![];
    }
    if padded {
        (0..n)
            .map(|t| (0..l).map(|k| (t + k + 1).saturating_sub(l)).collect())
            .collect()
    } else if n < l {
        vec![]
    } else {
        (0..=n - l).map(|s| (s..s + l).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        assert_eq!(sliding_windows(10, 3, false).len(), 8);
        assert_eq!(sliding_windows(10, 3, false)[0], vec![0, 1, 2]);
        let p = sliding_windows(4, 3, true);
        assert_eq!(p, vec![vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 2], vec![1, 2, 3]]);
        assert!(sliding_windows(2, 3, false).is_empty());
    }
}
