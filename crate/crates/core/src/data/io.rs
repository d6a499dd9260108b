//! On-disk dataset: binary PPM images plus tab-separated annotations and
//! train/val split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use glod_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{generate_scene, scene_seed, SceneSpec};
use crate::error::{GlodError, Result};
use crate::targets::GroundTruthObject;

pub const TRAIN_FRACTION: f64 = 0.85;
const ANNOTATION_HEADER: &str = "image_id\tclass_id\tcx\tcy\tw\th";
const SPLIT_HEADER: &str = "image_id\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Writes a `[3, H, W]` image as binary PPM, rounding and clamping to bytes.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.dims3("write_ppm")?;
    if c != 3 {
        return Err(GlodError::Invalid(format!("PPM needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push(image.data()[ch * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| GlodError::io(path, e))
}

/// Reads a binary PPM with maxval 255 into a `[3, H, W]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut raw = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(|e| GlodError::io(path, e))?;
    let bad = |reason: &str| GlodError::Parse { path: path.to_path_buf(), line: 1, reason: reason.to_string() };
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional comments, then exactly one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (expected P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let plane = w * h;
    if raw.len() < pos + 3 * plane {
        return Err(bad("pixel data is truncated"));
    }
    let px = &raw[pos..pos + 3 * plane];
    let data = (0..3 * plane).map(|i| px[(i % plane) * 3 + i / plane] as f32).collect();
    Ok(Tensor::new(vec![3, h, w], data)?)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| GlodError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GlodError::io(path, e))?;
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            out.push((i + 1, trimmed.to_string()));
        }
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &BTreeMap<u64, Vec<GroundTruthObject>>) -> Result<()> {
    let mut s = format!("{ANNOTATION_HEADER}\n");
    for (id, objs) in annotations {
        for o in objs {
            writeln!(s, "{id}\t{}\t{}\t{}\t{}\t{}", o.class_id, o.cx, o.cy, o.w, o.h).expect("string write");
        }
    }
    fs::write(path, s).map_err(|e| GlodError::io(path, e))
}

/// Parses annotations grouped by image id. Images without objects do not
/// appear.
pub fn read_annotations(path: &Path, num_classes: Option<usize>) -> Result<BTreeMap<u64, Vec<GroundTruthObject>>> {
    let mut out: BTreeMap<u64, Vec<GroundTruthObject>> = BTreeMap::new();
    for (line, text) in read_lines(path)? {
        if text == ANNOTATION_HEADER {
            continue;
        }
        let err = |reason: String| GlodError::Parse { path: path.to_path_buf(), line, reason };
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", cols.len())));
        }
        let id: u64 = cols[0].parse().map_err(|_| err(format!("bad image id `{}`", cols[0])))?;
        let class_id: usize = cols[1].parse().map_err(|_| err(format!("bad class id `{}`", cols[1])))?;
        if let Some(k) = num_classes {
            if class_id >= k {
                return Err(err(format!("class id {class_id} out of range for {k} classes")));
            }
        }
        let mut v = [0f32; 4];
        for (slot, (name, col)) in v.iter_mut().zip(["cx", "cy", "w", "h"].iter().zip(&cols[2..])) {
            *slot = col.parse().map_err(|_| err(format!("bad {name} `{col}`")))?;
            if !slot.is_finite() {
                return Err(err(format!("{name} is not finite")));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        out.entry(id).or_default().push(GroundTruthObject::new(class_id, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn write_split(path: &Path, split: &BTreeMap<u64, Split>) -> Result<()> {
    let mut s = format!("{SPLIT_HEADER}\n");
    for (id, sp) in split {
        writeln!(s, "{id}\t{}", sp.as_str()).expect("string write");
    }
    fs::write(path, s).map_err(|e| GlodError::io(path, e))
}

pub fn read_split(path: &Path) -> Result<BTreeMap<u64, Split>> {
    let mut out = BTreeMap::new();
    for (line, text) in read_lines(path)? {
        if text == SPLIT_HEADER {
            continue;
        }
        let err = |reason: String| GlodError::Parse { path: path.to_path_buf(), line, reason };
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 2 {
            return Err(err(format!("expected 2 tab-separated fields, found {}", cols.len())));
        }
        let id: u64 = cols[0].parse().map_err(|_| err(format!("bad image id `{}`", cols[0])))?;
        let sp = Split::parse(cols[1]).ok_or_else(|| err(format!("unknown split `{}`", cols[1])))?;
        if out.insert(id, sp).is_some() {
            return Err(err(format!("image {id} listed twice")));
        }
    }
    Ok(out)
}

/// Seeded assignment of `round(0.85 n)` ids to train and the rest to val.
pub fn split_ids(ids: &[u64], seed: u64) -> BTreeMap<u64, Split> {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (TRAIN_FRACTION * ids.len() as f64).round() as usize;
    shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, if i < n_train { Split::Train } else { Split::Val }))
        .collect()
}

/// A dataset directory: `images/<id>.ppm`, `annotations.tsv`, `split.tsv`
/// and `classes.txt`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub annotations: BTreeMap<u64, Vec<GroundTruthObject>>,
    pub split: BTreeMap<u64, Split>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let classes_path = root.join("classes.txt");
        let classes: Vec<String> = read_lines(&classes_path)?.into_iter().map(|(_, s)| s).collect();
        if classes.is_empty() {
            return Err(GlodError::Parse { path: classes_path, line: 1, reason: "no classes listed".into() });
        }
        let split = read_split(&root.join("split.tsv"))?;
        let mut annotations = read_annotations(&root.join("annotations.tsv"), Some(classes.len()))?;
        for id in annotations.keys() {
            if !split.contains_key(id) {
                return Err(GlodError::Invalid(format!("image {id} is annotated but missing from split.tsv")));
            }
        }
        for id in split.keys() {
            annotations.entry(*id).or_default();
        }
        Ok(Self { root: root.to_path_buf(), classes, annotations, split })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_path(&self, id: u64) -> PathBuf {
        image_path(&self.root, id)
    }

    pub fn load_image(&self, id: u64) -> Result<Tensor<f32>> {
        read_ppm(&self.image_path(id))
    }

    pub fn objects(&self, id: u64) -> &[GroundTruthObject] {
        self.annotations.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ids(&self, split: Split) -> Vec<u64> {
        self.split.iter().filter(|(_, &s)| s == split).map(|(&id, _)| id).collect()
    }

    /// Loads every image of `split` into memory, in id order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(u64, Tensor<f32>, Vec<GroundTruthObject>)>> {
        self.ids(split)
            .into_iter()
            .map(|id| Ok((id, self.load_image(id)?, self.objects(id).to_vec())))
            .collect()
    }
}

fn image_path(root: &Path, id: u64) -> PathBuf {
    root.join("images").join(format!("{id:06}.ppm"))
}

/// Renders `n` scenes from `seed` into `root` and writes the annotation,
/// split and class files.
pub fn generate_dataset(root: &Path, n: usize, seed: u64, spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| GlodError::io(&images, e))?;
    let mut annotations = BTreeMap::new();
    for i in 0..n as u64 {
        let scene = generate_scene(scene_seed(seed, i), spec)?;
        write_ppm(&image_path(root, i), &scene.image)?;
        annotations.insert(i, scene.objects);
    }
    let ids: Vec<u64> = (0..n as u64).collect();
    let split = split_ids(&ids, seed);
    write_annotations(&root.join("annotations.tsv"), &annotations)?;
    write_split(&root.join("split.tsv"), &split)?;
    let mut classes = String::new();
    for c in &spec.classes {
        classes.push_str(&c.name);
        classes.push('\n');
    }
    let path = root.join("classes.txt");
    fs::File::create(&path).and_then(|mut f| f.write_all(classes.as_bytes())).map_err(|e| GlodError::io(&path, e))?;
    Ok(Dataset { root: root.to_path_buf(), classes: spec.classes.iter().map(|c| c.name.clone()).collect(), annotations, split })
}
