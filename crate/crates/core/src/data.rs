//! Synthetic grouped covariate shift.
//!
//! Every image is a class template plus a group nuisance plus pixel noise:
//!
//! ```text
//! x = 0.5 + template(y) + bias(g) + contrast(g) * texture(g) + noise
//! ```
//!
//! Templates and textures repeat in every patch. Class templates are
//! orthonormal directions in patch space, orthogonal to the per-channel
//! constant directions that carry the bias. Group textures are drawn from a
//! subspace of the template span (all of it by default), so a single image
//! cannot tell texture from class signal, while the mean over many images of
//! a group can. A model without context can only memorize the textures of
//! the training groups, and fails on held-out ones.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{group_partition, GroupId, GroupedBatch};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const TEMPLATE_SEED: u64 = 0x7e3d_5a11;
const MAGIC: &[u8; 4] = b"CVDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    pub train_groups: usize,
    pub ood_groups: usize,
    pub images_per_group: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    /// Per-pixel RMS of a class template.
    pub signal_amp: f64,
    /// Channel biases are uniform in `[-bias_max, bias_max]`.
    pub bias_max: f64,
    /// Contrast multipliers are uniform in `[1 - gamma, 1 + gamma]`.
    pub contrast_gamma: f64,
    /// Per-pixel RMS of a group texture before the contrast multiplier.
    pub texture_amp: f64,
    /// Dimension of the subspace textures are drawn from.
    pub texture_rank: usize,
    pub noise_std: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_groups: 16,
            ood_groups: 4,
            images_per_group: 160,
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch: 4,
            signal_amp: 0.08,
            bias_max: 0.05,
            contrast_gamma: 0.25,
            texture_amp: 0.1,
            texture_rank: 8,
            noise_std: 0.15,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.train_groups == 0 || self.images_per_group == 0 {
            return bad("classes, train groups and images per group must be positive".into());
        }
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 || self.patch == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return bad(format!("patch {} does not tile {}x{}", self.patch, self.image_h, self.image_w));
        }
        let free = self.patch_dim() - self.channels;
        if self.num_classes > free {
            return bad(format!("{} classes need more than {free} free patch dimensions", self.num_classes));
        }
        if self.texture_rank > self.num_classes {
            return bad("texture rank cannot exceed the number of classes".into());
        }
        let amps = [self.signal_amp, self.bias_max, self.contrast_gamma, self.texture_amp, self.noise_std];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) || self.contrast_gamma > 1.0 {
            return bad("amplitudes must be finite and non-negative, contrast_gamma at most 1".into());
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return bad("val and test fractions must leave a non-empty train split".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    pub fn train_group_ids(&self) -> Vec<GroupId> {
        (0..self.train_groups as u64).map(GroupId).collect()
    }

    pub fn ood_group_ids(&self) -> Vec<GroupId> {
        let t = self.train_groups as u64;
        (t..t + self.ood_groups as u64).map(GroupId).collect()
    }
}

/// Nuisance parameters of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupShift {
    pub group: GroupId,
    pub bias: Vec<f64>,
    pub contrast: f64,
    /// Texture coefficients in the texture basis.
    pub coeffs: Vec<f64>,
}

impl GroupShift {
    pub fn draw(spec: &SyntheticShiftSpec, group: GroupId, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, "group_shift", group.0);
        let bias = (0..spec.channels)
            .map(|_| rng.uniform_range(-spec.bias_max, spec.bias_max))
            .collect();
        let contrast = rng.uniform_range(1.0 - spec.contrast_gamma, 1.0 + spec.contrast_gamma);
        let mut coeffs: Vec<f64> = (0..spec.texture_rank).map(|_| rng.normal()).collect();
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            coeffs.iter_mut().for_each(|c| *c /= norm);
        }
        Self { group, bias, contrast, coeffs }
    }
}

/// Orthonormal patch-space directions: class templates, then the texture basis.
#[derive(Clone, Debug)]
pub struct Patterns {
    pub templates: Vec<Vec<f64>>,
    pub textures: Vec<Vec<f64>>,
}

impl Patterns {
    pub fn new(spec: &SyntheticShiftSpec) -> Result<Self> {
        spec.validate()?;
        let p = spec.patch_dim();
        let c = spec.channels;
        let mut rng = Rng::derive(TEMPLATE_SEED, "templates", 0);
        // Channel-constant directions come first so templates avoid them.
        let mut basis: Vec<Vec<f64>> = (0..c)
            .map(|ch| {
                let mut v = vec![0.0; p];
                v.iter_mut().skip(ch).step_by(c).for_each(|x| *x = 1.0);
                normalized(v)
            })
            .collect();
        let mut templates = Vec::with_capacity(spec.num_classes);
        while templates.len() < spec.num_classes {
            let v: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
            if let Some(u) = orthogonalize(v, &basis) {
                basis.push(u.clone());
                templates.push(u);
            }
        }
        let mut textures: Vec<Vec<f64>> = Vec::with_capacity(spec.texture_rank);
        while textures.len() < spec.texture_rank {
            let mut v = vec![0.0; p];
            for t in &templates {
                let w = rng.normal();
                v.iter_mut().zip(t).for_each(|(x, y)| *x += w * y);
            }
            if let Some(u) = orthogonalize(v, &textures) {
                textures.push(u);
            }
        }
        Ok(Self { templates, textures })
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    // Two passes of Gram-Schmidt for numerical orthogonality.
    for _ in 0..2 {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| normalized(v))
}

/// A set of labelled, grouped images stored as one flat `[n, h, w, c]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub dims: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub groups: Vec<GroupId>,
    /// Dataset-wide image indices, unique across splits.
    pub ids: Vec<u64>,
}

impl Split {
    fn empty(name: &str, dims: [usize; 3]) -> Self {
        Self {
            name: name.to_string(),
            dims,
            images: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Distinct groups in first-occurrence order.
    pub fn group_ids(&self) -> Vec<GroupId> {
        group_partition(&self.groups).group_ids()
    }

    fn push(&mut self, other: &Split, i: usize) {
        self.images.extend_from_slice(other.image(i));
        self.labels.push(other.labels[i]);
        self.groups.push(other.groups[i]);
        self.ids.push(other.ids[i]);
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        let mut out = Split::empty(&self.name, self.dims);
        for &i in idx {
            out.push(self, i);
        }
        out
    }

    pub fn batch(&self, idx: &[usize]) -> GroupedBatch {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let [h, w, c] = self.dims;
        let groups: Vec<GroupId> = idx.iter().map(|&i| self.groups[i]).collect();
        GroupedBatch {
            images: Tensor::new(vec![idx.len(), h, w, c], data).expect("batch shape matches its data"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            partition: group_partition(&groups),
            groups,
        }
    }

    /// Indices of the members of `group`.
    pub fn members(&self, group: GroupId) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == group).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub spec: SyntheticShiftSpec,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
    pub id_test: Split,
    pub ood_test: Split,
}

impl DatasetSplit {
    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.val, &self.id_test, &self.ood_test]
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no split named {name:?}")))
    }
}

fn render_group(spec: &SyntheticShiftSpec, pat: &Patterns, shift: &GroupShift, seed: u64, first_id: u64) -> Split {
    let (h, w, c, p) = (spec.image_h, spec.image_w, spec.channels, spec.patch);
    let pd = spec.patch_dim();
    let scale = (pd as f64).sqrt();
    let mut nuisance = vec![0.0; pd];
    for (k, t) in shift.coeffs.iter().zip(&pat.textures) {
        for (x, y) in nuisance.iter_mut().zip(t) {
            *x += shift.contrast * spec.texture_amp * scale * k * y;
        }
    }
    for (j, x) in nuisance.iter_mut().enumerate() {
        *x += shift.bias[j % c];
    }

    let mut rng = Rng::derive(seed, "group_images", shift.group.0);
    let mut out = Split::empty("group", [h, w, c]);
    out.images.reserve(spec.images_per_group * spec.image_len());
    for i in 0..spec.images_per_group {
        let label = rng.below(spec.num_classes);
        let template = &pat.templates[label];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let j = ((y % p) * p + x % p) * c + ch;
                    let v = 0.5 + spec.signal_amp * scale * template[j] + nuisance[j] + spec.noise_std * rng.normal();
                    out.images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        out.labels.push(label);
        out.groups.push(shift.group);
        out.ids.push(first_id + i as u64);
    }
    out
}

/// Generates train/val/id_test from the training groups and ood_test from the held-out ones.
pub fn generate_dataset(spec: &SyntheticShiftSpec, seed: u64) -> Result<DatasetSplit> {
    let pat = Patterns::new(spec)?;
    let dims = [spec.image_h, spec.image_w, spec.channels];
    let per = spec.images_per_group as u64;
    let render = |g: GroupId| render_group(spec, &pat, &GroupShift::draw(spec, g, seed), seed, g.0 * per);

    let mut pool = Split::empty("pool", dims);
    for g in spec.train_group_ids() {
        let part = render(g);
        for i in 0..part.len() {
            pool.push(&part, i);
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    Rng::derive(seed, "split", 0).shuffle(&mut order);
    let n = order.len();
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_train = n - n_val - n_test;
    let named = |name: &str, idx: &[usize]| {
        let mut s = pool.subset(idx);
        s.name = name.to_string();
        s
    };

    let mut ood = Split::empty("ood_test", dims);
    for g in spec.ood_group_ids() {
        let part = render(g);
        for i in 0..part.len() {
            ood.push(&part, i);
        }
    }
    let mut ood_order: Vec<usize> = (0..ood.len()).collect();
    Rng::derive(seed, "split", 1).shuffle(&mut ood_order);

    let mut ood_test = ood.subset(&ood_order);
    ood_test.name = "ood_test".into();

    Ok(DatasetSplit {
        spec: spec.clone(),
        seed,
        train: named("train", &order[..n_train]),
        val: named("val", &order[n_train..n_train + n_val]),
        id_test: named("id_test", &order[n_train + n_val..]),
        ood_test,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform shuffle over the whole split.
    #[default]
    Uniform,
    /// Single-group batches, groups visited round-robin.
    Context,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "context" => Ok(Self::Context),
            other => Err(Error::InvalidArgument(format!("unknown sampler {other:?}"))),
        }
    }
}

/// One epoch of index batches over a uniformly shuffled split; the final short batch is kept.
pub fn uniform_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_batch_size(batch_size)?;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, "uniform_sampler", 0).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of single-group index batches; each image appears exactly once.
pub fn context_batches(groups: &[GroupId], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_batch_size(batch_size)?;
    let partition = group_partition(groups);
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = partition
        .groups()
        .enumerate()
        .map(|(k, (_, members))| {
            let mut m = members.to_vec();
            Rng::derive(seed, "context_sampler", k as u64).shuffle(&mut m);
            m.chunks(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut visit: Vec<usize> = (0..queues.len()).collect();
    Rng::derive(seed, "context_sampler_order", 0).shuffle(&mut visit);
    let mut out = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        for &k in &visit {
            if let Some(b) = queues[k].pop_front() {
                out.push(b);
            }
        }
    }
    Ok(out)
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(())
}

pub fn sampler_batches(split: &Split, batch_size: usize, sampler: SamplerKind, seed: u64) -> Result<Vec<Vec<usize>>> {
    match sampler {
        SamplerKind::Uniform => uniform_batches(split.len(), batch_size, seed),
        SamplerKind::Context => context_batches(&split.groups, batch_size, seed),
    }
}

/// Lazily materialized batches of a split.
pub struct Batches<'a> {
    split: &'a Split,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = GroupedBatch;

    fn next(&mut self) -> Option<GroupedBatch> {
        self.order.next().map(|idx| self.split.batch(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

pub fn make_batches(split: &Split, batch_size: usize, sampler: SamplerKind, seed: u64) -> Result<Batches<'_>> {
    let order = sampler_batches(split, batch_size, sampler, seed)?;
    Ok(Batches { split, order: order.into_iter() })
}

/// Consecutive chunks in stored order, as used for evaluation.
pub fn sequential_batches(split: &Split, batch_size: usize) -> Result<Batches<'_>> {
    check_batch_size(batch_size)?;
    let order: Vec<Vec<usize>> = (0..split.len())
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(Batches { split, order: order.into_iter() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub size: usize,
    pub groups: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: SyntheticShiftSpec,
    pub splits: Vec<SplitManifest>,
}

impl DatasetSplit {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: VERSION,
            seed: self.seed,
            spec: self.spec.clone(),
            splits: self
                .splits()
                .iter()
                .map(|s| SplitManifest {
                    name: s.name.clone(),
                    size: s.len(),
                    groups: s.group_ids().iter().map(|g| g.0).collect(),
                })
                .collect(),
        }
    }

    /// Binary layout: magic, version, spec JSON, seed, then per split its
    /// name, count and `(id, group, label, pixels)` records, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)?;
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for s in self.splits() {
            out.extend_from_slice(&(s.name.len() as u64).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            for i in 0..s.len() {
                out.extend_from_slice(&s.ids[i].to_le_bytes());
                out.extend_from_slice(&s.groups[i].0.to_le_bytes());
                out.extend_from_slice(&(s.labels[i] as u64).to_le_bytes());
                for v in s.image(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Dataset("not a dataset file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Dataset(format!("unsupported dataset version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let spec: SyntheticShiftSpec = serde_json::from_slice(r.take(len)?)?;
        spec.validate()?;
        let seed = r.u64()?;
        let dims = [spec.image_h, spec.image_w, spec.channels];
        let n_pix = spec.image_len();
        let mut splits = Vec::with_capacity(4);
        for _ in 0..4 {
            let len = r.u64()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Dataset("split name is not UTF-8".into()))?;
            let count = r.u64()? as usize;
            let mut s = Split::empty(&name, dims);
            for _ in 0..count {
                s.ids.push(r.u64()?);
                s.groups.push(GroupId(r.u64()?));
                let label = r.u64()? as usize;
                if label >= spec.num_classes {
                    return Err(Error::Dataset(format!("label {label} out of range")));
                }
                s.labels.push(label);
                for _ in 0..n_pix {
                    s.images.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
                }
            }
            splits.push(s);
        }
        if r.pos != bytes.len() {
            return Err(Error::Dataset(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = splits.into_iter();
        let mut next = |want: &str| -> Result<Split> {
            let s = it.next().expect("four splits read");
            if s.name != want {
                return Err(Error::Dataset(format!("expected split {want:?}, found {:?}", s.name)));
            }
            Ok(s)
        };
        Ok(Self {
            train: next("train")?,
            val: next("val")?,
            id_test: next("id_test")?,
            ood_test: next("ood_test")?,
            spec,
            seed,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let mut w = BufWriter::new(fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?);
        w.write_all(&self.to_bytes()?).map_err(|e| Error::io(&bin, e))?;
        w.flush().map_err(|e| Error::io(&bin, e))?;
        let man = dir.join(format!("{stem}.manifest.json"));
        fs::write(&man, serde_json::to_string_pretty(&self.manifest())?).map_err(|e| Error::io(&man, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Dataset(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            images_per_group: 40,
            ..SyntheticShiftSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small(), 3).unwrap();
        let b = generate_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.images, generate_dataset(&small(), 4).unwrap().train.images);
    }

    #[test]
    fn no_variation_means_identical_class_images() {
        let spec = SyntheticShiftSpec {
            noise_std: 0.0,
            bias_max: 0.0,
            contrast_gamma: 0.0,
            texture_amp: 0.0,
            ..small()
        };
        let d = generate_dataset(&spec, 1).unwrap();
        let mut first: Vec<Option<Vec<f64>>> = vec![None; spec.num_classes];
        for s in d.splits() {
            for i in 0..s.len() {
                match &first[s.labels[i]] {
                    None => first[s.labels[i]] = Some(s.image(i).to_vec()),
                    Some(img) => assert_eq!(img.as_slice(), s.image(i)),
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_ood_unseen() {
        let d = generate_dataset(&small(), 5).unwrap();
        let mut ids: Vec<u64> = d.splits().iter().flat_map(|s| s.ids.clone()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(n, 20 * 40);
        let ood = d.spec.ood_group_ids();
        for s in [&d.train, &d.val, &d.id_test] {
            assert!(s.groups.iter().all(|g| !ood.contains(g)));
        }
        assert!(d.ood_test.groups.iter().all(|g| ood.contains(g)));
        for b in make_batches(&d.train, 7, SamplerKind::Uniform, 0).unwrap() {
            assert!(b.groups.iter().all(|g| !ood.contains(g)));
        }
    }

    #[test]
    fn patterns_orthonormal_and_bias_free() {
        let spec = SyntheticShiftSpec::default();
        let pat = Patterns::new(&spec).unwrap();
        let all: Vec<&Vec<f64>> = pat.templates.iter().collect();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            for ch in 0..spec.channels {
                let s: f64 = a.iter().skip(ch).step_by(spec.channels).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impossible_specs_rejected() {
        for spec in [
            SyntheticShiftSpec { num_classes: 0, ..small() },
            SyntheticShiftSpec { patch: 5, ..small() },
            SyntheticShiftSpec { num_classes: 46, ..small() },
            SyntheticShiftSpec { val_fraction: 0.6, test_fraction: 0.4, ..small() },
        ] {
            assert!(generate_dataset(&spec, 0).is_err());
        }
    }

    #[test]
    fn make_batches_sizes_and_multiset() {
        let b: Vec<usize> = uniform_batches(10, 4, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(b, vec![4, 4, 2]);
        let a = uniform_batches(10, 4, 1).unwrap().concat();
        let c = uniform_batches(10, 4, 2).unwrap().concat();
        assert_ne!(a, c);
        let (mut a, mut c) = (a, c);
        a.sort_unstable();
        c.sort_unstable();
        assert_eq!(a, c);
        assert!(uniform_batches(10, 0, 1).is_err());
    }

    #[test]
    fn context_sampler_single_group_and_complete() {
        let d = generate_dataset(&small(), 2).unwrap();
        let batches = context_batches(&d.train.groups, 8, 4).unwrap();
        let mut seen = vec![0usize; d.train.len()];
        for idx in &batches {
            let b = d.train.batch(idx);
            assert_eq!(b.partition.num_groups(), 1);
            idx.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
        // Round-robin: the first batches cover every group once.
        let first: Vec<GroupId> = batches[..16].iter().map(|b| d.train.groups[b[0]]).collect();
        let mut sorted = first.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);

        let mixed = make_batches(&d.train, 16, SamplerKind::Uniform, 4).unwrap();
        let mean: f64 = mixed.map(|b| b.partition.num_groups() as f64).sum::<f64>()
            / uniform_batches(d.train.len(), 16, 4).unwrap().len() as f64;
        assert!(mean > 1.0);
    }

    #[test]
    fn binary_round_trip() {
        let d = generate_dataset(&small(), 9).unwrap();
        let bytes = d.to_bytes().unwrap();
        let back = DatasetSplit::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(DatasetSplit::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let m = d.manifest();
        assert_eq!(m.splits[3].groups.len(), 4);
        assert!(m.splits[3].groups.iter().all(|&g| g >= 16));
        assert_eq!(m.splits.iter().map(|s| s.size).sum::<usize>(), 800);
    }
}
