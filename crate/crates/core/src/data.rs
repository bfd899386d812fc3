//! Image datasets: PGM/PPM ingestion, synthetic motif tasks, stratified
//! splitting, label encoding and class-balancing augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Error, Result};

/// H x W x C image, interleaved channels, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Bilinear sample at continuous pixel coordinates, clamping to the edge.
    pub fn sample_clamped(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::new(height, width, self.channels);
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_clamped(src_y, src_x, c));
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(self.height - 1 - y, x, c));
                }
            }
        }
        out
    }

    /// Rotates by `degrees` about the centre and zooms by `zoom` (values
    /// below 1 magnify), bilinear with edge-clamp padding.
    pub fn rotate_zoom(&self, degrees: f64, zoom: f64) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            let dy = y as f64 - cy;
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let src_x = cx + zoom * (c * dx + s * dy);
                let src_y = cy + zoom * (-s * dx + c * dy);
                for ch in 0..self.channels {
                    out.set(y, x, ch, self.sample_clamped(src_y, src_x, ch));
                }
            }
        }
        out
    }

    /// Normalized box blur with an odd `kernel`, separable, edge-clamped.
    pub fn box_blur(&self, kernel: usize) -> Image {
        if kernel <= 1 {
            return self.clone();
        }
        let r = (kernel / 2) as isize;
        let norm = 1.0 / kernel as f64;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let s: f64 = (-r..=r)
                        .map(|d| self.get(y, clamp(x as isize + d, self.width), c))
                        .sum();
                    tmp.set(y, x, c, s * norm);
                }
            }
        }
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let s: f64 = (-r..=r)
                        .map(|d| tmp.get(clamp(y as isize + d, self.height), x, c))
                        .sum();
                    out.set(y, x, c, s * norm);
                }
            }
        }
        out
    }
}

/// A labelled set of equally-sized images.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Stable per-sample identifiers, carried through splits and extraction.
    pub ids: Vec<u64>,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ids = (0..images.len() as u64).collect();
        let set = Self {
            images,
            labels,
            class_names,
            ids,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() || self.images.len() != self.ids.len() {
            return Err(Error::InvalidDataset("images/labels/ids length mismatch".into()));
        }
        if let Some(first) = self.images.first() {
            if first.channels != 1 && first.channels != 3 {
                return Err(Error::InvalidDataset(format!(
                    "unsupported channel count {}",
                    first.channels
                )));
            }
            let shape = (first.height, first.width, first.channels);
            if self.images.iter().any(|im| (im.height, im.width, im.channels) != shape) {
                return Err(Error::InvalidDataset("images differ in shape".into()));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// (height, width, channels) of the images, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.height, im.width, im.channels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Resizes every image, keeping labels and ids.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self {
            images: self.images.iter().map(|im| im.resize(height, width)).collect(),
            ..self.clone()
        }
    }

    /// Adds `offset` to every sample id.
    pub fn with_id_offset(mut self, offset: u64) -> Self {
        self.ids.iter_mut().for_each(|id| *id += offset);
        self
    }
}

/// Train/test split parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            seed,
            stratified: true,
        }
    }
}

/// Augmentation ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotation_degrees: (f64, f64),
    pub zoom: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    pub blur_kernel: usize,
    /// Probability that a generated sample is blurred.
    pub blur_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: (-15.0, 15.0),
            zoom: (0.8, 1.0),
            hflip: true,
            vflip: true,
            blur_kernel: 9,
            blur_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(invalid_arg!("blur kernel must be odd, got {}", self.blur_kernel));
        }
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && hi <= 2.0 && lo <= hi) {
            return Err(invalid_arg!("zoom range ({lo}, {hi}) outside (0, 2]"));
        }
        if self.rotation_degrees.0 > self.rotation_degrees.1 {
            return Err(invalid_arg!("empty rotation range"));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(invalid_arg!("blur probability outside [0, 1]"));
        }
        Ok(())
    }

    /// One random augmented view of `img`.
    pub fn augment<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        let (rlo, rhi) = self.rotation_degrees;
        let angle = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
        let (zlo, zhi) = self.zoom;
        let zoom = if zhi > zlo { rng.random_range(zlo..=zhi) } else { zlo };
        let mut out = img.rotate_zoom(angle, zoom);
        if self.hflip && rng.random_bool(0.5) {
            out = out.hflip();
        }
        if self.vflip && rng.random_bool(0.5) {
            out = out.vflip();
        }
        if self.blur_kernel > 1 && rng.random_bool(self.blur_probability) {
            out = out.box_blur(self.blur_kernel);
        }
        out
    }
}

/// Decodes a binary PGM (P5) or PPM (P6) file with max value <= 255.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::format(path, msg))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported format {other}, expected P5 or P6")),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("max value {maxval} not in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err("truncated raster".into());
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(Image {
        height,
        width,
        channels,
        data,
    })
}

/// Encodes an image as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pnm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Loads `<root>/<class>/<image>` trees of PGM/PPM files, resizing to `size`.
///
/// Class names are sorted lexicographically; files within a class are read in
/// lexicographic order. Grayscale images in a colour dataset are replicated to
/// three channels.
pub fn load_image_dir(root: &Path, size: (usize, usize)) -> Result<LabeledImageSet> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{}: no class directories",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = read_dir(dir)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("pgm" | "ppm" | "pnm")
                    )
            })
            .collect();
        if files.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "{}: empty class directory",
                dir.display()
            )));
        }
        for f in files {
            images.push(read_pnm(&f)?.resize(size.0, size.1));
            labels.push(label);
        }
    }
    if images.iter().any(|im| im.channels == 3) {
        images = images
            .into_iter()
            .map(|im| if im.channels == 1 { replicate_channel(&im) } else { im })
            .collect();
    }
    LabeledImageSet::new(images, labels, class_names)
}

/// Writes a set as `<root>/<class>/<id>.pgm|ppm`.
pub fn save_image_dir(set: &LabeledImageSet, root: &Path) -> Result<()> {
    for name in &set.class_names {
        let d = root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for ((img, &label), id) in set.images.iter().zip(&set.labels).zip(&set.ids) {
        let ext = if img.channels == 1 { "pgm" } else { "ppm" };
        let p = root.join(&set.class_names[label]).join(format!("{id:06}.{ext}"));
        write_pnm(img, &p)?;
    }
    Ok(())
}

fn replicate_channel(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len() * 3);
    for &v in &img.data {
        data.extend_from_slice(&[v, v, v]);
    }
    Image {
        channels: 3,
        data,
        ..*img
    }
}

/// Replicates a single grey channel into three identical channels.
pub fn gray_to_3ch(set: &LabeledImageSet) -> LabeledImageSet {
    if set.image_shape().is_some_and(|(_, _, c)| c == 3) {
        warn!("gray_to_3ch called on a three-channel set; returning it unchanged");
        return set.clone();
    }
    LabeledImageSet {
        images: set.images.iter().map(replicate_channel).collect(),
        ..set.clone()
    }
}

pub fn one_hot(label: usize, n_classes: usize) -> Result<Vec<f64>> {
    if label >= n_classes {
        return Err(invalid_arg!("label {label} out of range for {n_classes} classes"));
    }
    let mut v = vec![0.0; n_classes];
    v[label] = 1.0;
    Ok(v)
}

/// Per-class train counts: floor of the fractional share, remainders handed
/// to the largest classes first, never taking a class's last test sample.
fn stratified_train_counts(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let mut train: Vec<usize> = counts
        .iter()
        .map(|&n| ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1)))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut remaining = target.saturating_sub(train.iter().sum());
    while remaining > 0 {
        let mut progressed = false;
        for &c in &order {
            if remaining == 0 {
                break;
            }
            if train[c] + 1 < counts[c] {
                train[c] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    train
}

/// Seeded (optionally stratified) train/test partition.
pub fn stratified_split(
    set: &LabeledImageSet,
    spec: &SplitSpec,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(invalid_arg!("train fraction {} outside (0, 1)", spec.train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    if spec.stratified {
        let counts = set.class_counts();
        if let Some(c) = counts.iter().position(|&n| n < 2) {
            return Err(Error::InvalidDataset(format!(
                "class {:?} has fewer than 2 samples",
                set.class_names[c]
            )));
        }
        let quota = stratified_train_counts(&counts, spec.train_fraction);
        for (class, &q) in quota.iter().enumerate() {
            let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
            members.shuffle(&mut rng);
            train_idx.extend_from_slice(&members[..q]);
            test_idx.extend_from_slice(&members[q..]);
        }
    } else {
        let mut all: Vec<usize> = (0..set.len()).collect();
        all.shuffle(&mut rng);
        let q = (spec.train_fraction * set.len() as f64).round() as usize;
        train_idx.extend_from_slice(&all[..q]);
        test_idx.extend_from_slice(&all[q..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((set.subset(&train_idx), set.subset(&test_idx)))
}

fn next_id(set: &LabeledImageSet) -> u64 {
    set.ids.iter().max().map_or(0, |m| m + 1)
}

/// Augments minority classes up to the size of the largest class.
///
/// Originals keep their positions; synthetic samples are appended class by
/// class with fresh ids.
pub fn augment_balance(train: &LabeledImageSet, cfg: &AugmentConfig) -> Result<LabeledImageSet> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidDataset("cannot balance an empty set".into()));
    }
    let counts = train.class_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut out = train.clone();
    let mut id = next_id(train);
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 || n == target {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let members: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        for k in 0..(target - n) {
            let src = members[k % members.len()];
            out.images.push(cfg.augment(&train.images[src], &mut rng));
            out.labels.push(class);
            out.ids.push(id);
            id += 1;
        }
    }
    Ok(out)
}

/// Adds `factor - 1` augmented copies of every sample.
pub fn augment_multiply(set: &LabeledImageSet, factor: usize, cfg: &AugmentConfig) -> Result<LabeledImageSet> {
    cfg.validate()?;
    if factor == 0 {
        return Err(invalid_arg!("multiplication factor must be at least 1"));
    }
    let mut out = set.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut id = next_id(set);
    for _ in 1..factor {
        for i in 0..set.len() {
            out.images.push(cfg.augment(&set.images[i], &mut rng));
            out.labels.push(set.labels[i]);
            out.ids.push(id);
            id += 1;
        }
    }
    Ok(out)
}

/// Families of synthetic classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    /// Four non-medical-looking motifs in colour, standing in for a large
    /// generic source domain.
    Generic,
    Shapes3,
    Shapes4,
    Binary,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "generic" => Self::Generic,
            "shapes3" => Self::Shapes3,
            "shapes4" => Self::Shapes4,
            "binary" => Self::Binary,
            other => return Err(invalid_arg!("unknown synthetic task kind {other:?}")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Generic => "generic",
            Self::Shapes3 => "shapes3",
            Self::Shapes4 => "shapes4",
            Self::Binary => "binary",
        }
    }

    pub fn motifs(self) -> &'static [Motif] {
        use Motif::*;
        match self {
            Self::Generic => &[Square, Triangle, Diagonal, Stripes],
            Self::Shapes3 => &[Disk, Bar, Cross],
            Self::Shapes4 => &[Disk, Bar, Cross, Ring],
            Self::Binary => &[Disk, Ring],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motif {
    Disk,
    Ring,
    Bar,
    Cross,
    Square,
    Triangle,
    Diagonal,
    Stripes,
}

impl Motif {
    pub fn name(self) -> &'static str {
        match self {
            Motif::Disk => "disk",
            Motif::Ring => "ring",
            Motif::Bar => "bar",
            Motif::Cross => "cross",
            Motif::Square => "square",
            Motif::Triangle => "triangle",
            Motif::Diagonal => "diagonal",
            Motif::Stripes => "stripes",
        }
    }

    /// Coverage at offset (dy, dx) from the motif centre; `r` is the motif
    /// radius and `t` the stroke half-width, both in pixels.
    fn covers(self, dy: f64, dx: f64, r: f64, t: f64, y: f64) -> bool {
        let d = (dy * dy + dx * dx).sqrt();
        match self {
            Motif::Disk => d <= r,
            Motif::Ring => (d - r).abs() <= t,
            Motif::Bar => dy.abs() <= t && dx.abs() <= r,
            Motif::Cross => {
                // diagonal cross, so a horizontal bar is not a subset of it
                let along = (dx.abs() + dy.abs()) / std::f64::consts::SQRT_2;
                (dx.abs() - dy.abs()).abs() / std::f64::consts::SQRT_2 <= t && along <= r
            }
            Motif::Square => {
                let m = dy.abs().max(dx.abs());
                m <= r && m >= r - 2.0 * t
            }
            Motif::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Motif::Diagonal => (dx - dy).abs() / std::f64::consts::SQRT_2 <= t && dx.abs() <= r && dy.abs() <= r,
            Motif::Stripes => ((y / (2.0 * t.max(1.0))).floor() as i64) % 2 == 0,
        }
    }
}

/// Rendering parameters for synthetic motifs. All lengths are fractions of
/// the smaller image side.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthStyle {
    pub channels: usize,
    /// Maximum centre offset.
    pub jitter: f64,
    pub radius: f64,
    /// Relative spread of the radius around `radius`.
    pub radius_spread: f64,
    pub thickness: f64,
    pub intensity: (f64, f64),
    pub background: f64,
    /// Random per-sample colour tint (3-channel only).
    pub tint: bool,
}

impl SynthStyle {
    pub fn for_kind(kind: SyntheticKind) -> Self {
        let colour = kind == SyntheticKind::Generic;
        Self {
            channels: if colour { 3 } else { 1 },
            jitter: 0.06,
            radius: 0.3,
            radius_spread: 0.15,
            thickness: 0.08,
            intensity: (0.7, 1.0),
            background: 0.1,
            tint: colour,
        }
    }

    /// Same motifs with shifted geometry and contrast, used for target
    /// domains.
    pub fn shifted(mut self) -> Self {
        self.radius = 0.24;
        self.thickness = 0.1;
        self.background = 0.2;
        self.intensity = (0.6, 0.95);
        self
    }
}

/// Generates `n_per_class` images per motif of `kind`.
pub fn make_synthetic_task(
    kind: SyntheticKind,
    n_per_class: usize,
    size: (usize, usize),
    noise_std: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    make_synthetic_task_with(kind, n_per_class, size, noise_std, seed, &SynthStyle::for_kind(kind))
}

pub fn make_synthetic_task_with(
    kind: SyntheticKind,
    n_per_class: usize,
    size: (usize, usize),
    noise_std: f64,
    seed: u64,
    style: &SynthStyle,
) -> Result<LabeledImageSet> {
    if n_per_class == 0 {
        return Err(invalid_arg!("n_per_class must be at least 1"));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(invalid_arg!("noise std must be finite and non-negative"));
    }
    if style.channels != 1 && style.channels != 3 {
        return Err(invalid_arg!("channels must be 1 or 3"));
    }
    let (h, w) = size;
    if h < 4 || w < 4 {
        return Err(invalid_arg!("image size {h}x{w} too small"));
    }
    let motifs = kind.motifs();
    let side = h.min(w) as f64;
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(motifs.len() * n_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (label, motif) in motifs.iter().enumerate() {
        for _ in 0..n_per_class {
            let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * style.jitter * side;
            let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * style.jitter * side;
            let r = style.radius * side * (1.0 + rng.random_range(-1.0..=1.0) * style.radius_spread);
            let t = (style.thickness * side).max(0.75);
            let level = rng.random_range(style.intensity.0..=style.intensity.1);
            let tint: Vec<f64> = (0..style.channels)
                .map(|_| if style.tint { rng.random_range(0.5..=1.0) } else { 1.0 })
                .collect();
            let mut img = Image::new(h, w, style.channels);
            for y in 0..h {
                for x in 0..w {
                    let on = motif.covers(y as f64 - cy, x as f64 - cx, r, t, y as f64);
                    for (c, &tc) in tint.iter().enumerate() {
                        let base = if on { level * tc } else { style.background };
                        let n = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        img.set(y, x, c, (base + n).clamp(0.0, 1.0));
                    }
                }
            }
            images.push(img);
            labels.push(label);
        }
    }
    let names = motifs.iter().map(|m| m.name().to_string()).collect();
    LabeledImageSet::new(images, labels, names)
}

/// Per-class sample indices, in ascending order.
pub fn indices_by_class(labels: &[usize], n_classes: usize) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = (0..n_classes).map(|c| (c, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(counts: &[usize]) -> LabeledImageSet {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                images.push(Image::filled(4, 4, 1, (i as f64) / (n as f64)));
                labels.push(c);
            }
        }
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        LabeledImageSet::new(images, labels, names).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap(), vec![1.0]);
        assert!(one_hot(4, 4).is_err());
    }

    #[test]
    fn gray_replication() {
        let set = LabeledImageSet::new(
            vec![Image {
                height: 2,
                width: 2,
                channels: 1,
                data: vec![0.1, 0.2, 0.3, 0.4],
            }],
            vec![0],
            vec!["a".into()],
        )
        .unwrap();
        let out = gray_to_3ch(&set);
        let im = &out.images[0];
        assert_eq!(im.channels, 3);
        for y in 0..2 {
            for x in 0..2 {
                let v = set.images[0].get(y, x, 0);
                for c in 0..3 {
                    assert_eq!(im.get(y, x, c).to_bits(), v.to_bits());
                }
            }
        }
        assert!((im.mean() - set.images[0].mean()).abs() < 1e-15);
        // already three channels: unchanged
        assert_eq!(gray_to_3ch(&out), out);
    }

    #[test]
    fn split_exact_and_deterministic() {
        let set = tiny_set(&[5, 5]);
        let (tr, te) = stratified_split(&set, &SplitSpec::new(1)).unwrap();
        assert_eq!(tr.class_counts(), vec![4, 4]);
        assert_eq!(te.class_counts(), vec![1, 1]);
        let (tr2, _) = stratified_split(&set, &SplitSpec::new(1)).unwrap();
        assert_eq!(tr.ids, tr2.ids);
    }

    #[test]
    fn split_proportions_and_partition() {
        let set = tiny_set(&[60, 40]);
        let (tr, te) = stratified_split(&set, &SplitSpec::new(9)).unwrap();
        let c = tr.class_counts();
        assert!(c[0].abs_diff(48) <= 1 && c[1].abs_diff(32) <= 1);
        let mut all: Vec<u64> = tr.ids.iter().chain(&te.ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_singleton_class() {
        let set = tiny_set(&[5, 1]);
        assert!(matches!(
            stratified_split(&set, &SplitSpec::new(0)),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn balance_counts() {
        let set = tiny_set(&[10, 4]);
        let out = augment_balance(&set, &AugmentConfig::default()).unwrap();
        assert_eq!(out.class_counts(), vec![10, 10]);
        assert_eq!(&out.images[..14], &set.images[..]);
        let balanced = tiny_set(&[3, 3]);
        assert_eq!(augment_balance(&balanced, &AugmentConfig::default()).unwrap(), balanced);
    }

    #[test]
    fn augment_config_validation() {
        let mut cfg = AugmentConfig::default();
        cfg.blur_kernel = 4;
        assert!(cfg.validate().is_err());
        cfg.blur_kernel = 9;
        cfg.zoom = (0.0, 1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flips_are_involutions_and_identity_transforms() {
        let set = make_synthetic_task(SyntheticKind::Shapes3, 1, (9, 7), 0.2, 4).unwrap();
        let im = &set.images[1];
        assert_eq!(&im.hflip().hflip(), im);
        assert_eq!(&im.vflip().vflip(), im);
        let same = im.rotate_zoom(0.0, 1.0);
        let err = same.data.iter().zip(&im.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn blur_preserves_interior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut im = Image::new(24, 24, 1);
        // non-constant content away from the border
        for y in 8..16 {
            for x in 8..16 {
                im.set(y, x, 0, rng.random_range(0.0..1.0));
            }
        }
        let b = im.box_blur(3);
        assert!((b.mean() - im.mean()).abs() < 1e-6);
    }

    #[test]
    fn constant_resize_stays_constant() {
        let im = Image::filled(8, 8, 1, 0.37);
        let up = im.resize(16, 16);
        assert!(up.data.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn pnm_roundtrip_and_scaling() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[128, 0, 255]);
        let im = parse_pnm(&bytes).unwrap();
        assert_eq!(im.data, vec![128.0 / 255.0, 0.0, 1.0]);
        assert_eq!(encode_pnm(&im), bytes);
        assert!(parse_pnm(b"P3\n1 1\n255\n").is_err());
        assert!(parse_pnm(b"P5\n2 2\n255\n\x01").is_err());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = make_synthetic_task(SyntheticKind::Shapes3, 10, (16, 16), 0.0, 7).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.n_classes(), 3);
        let b = make_synthetic_task(SyntheticKind::Shapes3, 10, (16, 16), 0.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().flat_map(|i| &i.data).all(|v| (0.0..=1.0).contains(v)));
        let g = make_synthetic_task(SyntheticKind::Generic, 2, (16, 16), 0.05, 1).unwrap();
        assert_eq!(g.image_shape(), Some((16, 16, 3)));
        assert_eq!(g.n_classes(), 4);
    }

    #[test]
    fn nearest_centroid_separates_noiseless_shapes() {
        let set = make_synthetic_task(SyntheticKind::Shapes3, 20, (16, 16), 0.0, 3).unwrap();
        let dim = 16 * 16;
        let mut centroids = vec![vec![0.0; dim]; 3];
        for (im, &l) in set.images.iter().zip(&set.labels) {
            for (c, v) in centroids[l].iter_mut().zip(&im.data) {
                *c += v / 20.0;
            }
        }
        for (im, &l) in set.images.iter().zip(&set.labels) {
            let d: Vec<f64> = centroids
                .iter()
                .map(|c| c.iter().zip(&im.data).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let best = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            assert_eq!(best, l);
        }
    }
}
