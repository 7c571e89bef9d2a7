//! UEA `.ts` ingestion, normalization and batching.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn suffix(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Test => "TEST",
        }
    }
}

/// One labelled series, channel-major: `values[c * len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Vec<f64>,
    pub label: usize,
    /// Length before any padding, used to clip explanation spans.
    pub raw_len: usize,
}

impl Instance {
    pub fn len(&self, channels: usize) -> usize {
        self.values.len() / channels
    }

    pub fn channel(&self, c: usize, len: usize) -> &[f64] {
        &self.values[c * len..(c + 1) * len]
    }

    /// Right-pads every channel with its last value until the length is a
    /// multiple of `m`.
    pub fn pad_to_multiple(&self, channels: usize, m: usize) -> Instance {
        let len = self.len(channels);
        let target = len.div_ceil(m.max(1)) * m.max(1);
        if target == len {
            return self.clone();
        }
        let mut values = Vec::with_capacity(channels * target);
        for c in 0..channels {
            let ch = self.channel(c, len);
            values.extend_from_slice(ch);
            let last = ch.last().copied().unwrap_or(0.0);
            values.extend(std::iter::repeat_n(last, target - len));
        }
        Instance {
            values,
            label: self.label,
            raw_len: self.raw_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
    pub num_channels: usize,
    pub series_length: usize,
    pub class_names: Vec<String>,
    pub split: Split,
}

/// Per-channel moments from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

pub fn split_path(root: &Path, name: &str, split: Split) -> PathBuf {
    root.join(name).join(format!("{name}_{}.ts", split.suffix()))
}

/// Loads `<root>/<name>/<name>_{TRAIN,TEST}.ts`; the test split's labels
/// are mapped onto the training split's class order.
pub fn load_pair(root: &Path, name: &str) -> Result<(Dataset, Dataset)> {
    let train = parse_ts(&split_path(root, name, Split::Train))?;
    let mut test = parse_ts(&split_path(root, name, Split::Test))?;
    test.remap_labels(&train.class_names)?;
    if test.num_channels != train.num_channels {
        return Err(Error::Data(format!(
            "{name}: train has {} channels, test has {}",
            train.num_channels, test.num_channels
        )));
    }
    Ok((train, test))
}

pub fn parse_ts(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let split = if stem.to_ascii_uppercase().ends_with("_TEST") {
        Split::Test
    } else {
        Split::Train
    };
    parse_ts_str(&text, &path.display().to_string(), split)
}

struct Header {
    name: Option<String>,
    dimensions: Option<usize>,
    series_length: Option<usize>,
    labels: Option<Vec<String>>,
}

pub fn parse_ts_str(text: &str, origin: &str, split: Split) -> Result<Dataset> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut header = Header {
        name: None,
        dimensions: None,
        series_length: None,
        labels: None,
    };
    let mut in_data = false;
    let mut rows: Vec<(usize, Vec<Vec<f64>>, String)> = Vec::new();
    let mut width = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data && line.starts_with('@') {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            let num = |v: Option<&&str>| -> Result<usize> {
                v.and_then(|s| s.parse().ok())
                    .ok_or_else(|| fmt_err(lineno, format!("{key} expects a positive integer")))
            };
            match key.as_str() {
                "@problemname" => header.name = rest.first().map(|s| s.to_string()),
                "@dimensions" => header.dimensions = Some(num(rest.first())?),
                "@serieslength" => header.series_length = Some(num(rest.first())?),
                "@timestamps" if rest.first().is_some_and(|v| v.eq_ignore_ascii_case("true")) => {
                    return Err(fmt_err(lineno, "timestamped series are not supported".into()));
                }
                "@classlabel" => {
                    if rest.first().is_some_and(|v| v.eq_ignore_ascii_case("true")) {
                        header.labels = Some(rest[1..].iter().map(|s| s.to_string()).collect());
                    }
                }
                "@data" => in_data = true,
                _ => {}
            }
            continue;
        }
        if !in_data {
            return Err(fmt_err(lineno, "data before @data".into()));
        }
        let mut fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(fmt_err(lineno, "expected channels and a class label".into()));
        }
        let label = fields.pop().unwrap().trim().to_string();
        if let Some(w) = width {
            if fields.len() != w {
                return Err(fmt_err(lineno, format!("expected {w} channels, found {}", fields.len())));
            }
        } else {
            width = Some(fields.len());
        }
        let mut channels = Vec::with_capacity(fields.len());
        for f in fields {
            let mut ch = Vec::new();
            for tok in f.split(',') {
                let tok = tok.trim();
                let v = if tok == "?" || tok.eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    tok.parse::<f64>()
                        .map_err(|_| fmt_err(lineno, format!("bad value {tok:?}")))?
                };
                ch.push(v);
            }
            channels.push(ch);
        }
        rows.push((lineno, channels, label));
    }

    if !in_data {
        return Err(fmt_err(0, "missing @data section".into()));
    }
    if rows.is_empty() {
        return Err(fmt_err(0, "no data lines".into()));
    }
    let c = width.unwrap();
    if let Some(d) = header.dimensions {
        if d != c {
            return Err(fmt_err(rows[0].0, format!("@dimensions says {d}, data has {c}")));
        }
    }

    let mut class_names = header.labels.clone().unwrap_or_default();
    let mut labels = Vec::with_capacity(rows.len());
    for (_, _, label) in &rows {
        match class_names.iter().position(|n| n == label) {
            Some(i) => labels.push(i),
            None if header.labels.is_some() => {
                return Err(Error::UnknownLabel { label: label.clone() });
            }
            None => {
                class_names.push(label.clone());
                labels.push(class_names.len() - 1);
            }
        }
    }

    impute_missing(&mut rows, c);

    let series_length = rows
        .iter()
        .flat_map(|(_, chs, _)| chs.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    if series_length == 0 {
        return Err(fmt_err(rows[0].0, "empty series".into()));
    }
    if let Some(sl) = header.series_length {
        if sl != series_length {
            return Err(fmt_err(rows[0].0, format!("@seriesLength says {sl}, data has {series_length}")));
        }
    }
    let instances = rows
        .into_iter()
        .zip(labels)
        .map(|((_, chs, _), label)| {
            let raw_len = chs.iter().map(Vec::len).max().unwrap_or(0);
            let mut values = Vec::with_capacity(c * series_length);
            for ch in chs {
                let last = ch.last().copied().unwrap_or(0.0);
                let n = ch.len();
                values.extend(ch);
                values.extend(std::iter::repeat_n(last, series_length - n));
            }
            Instance {
                values,
                label,
                raw_len,
            }
        })
        .collect();

    Ok(Dataset {
        name: header.name.unwrap_or_else(|| origin.to_string()),
        instances,
        num_channels: c,
        series_length,
        class_names,
        split,
    })
}

/// Replaces missing values with the mean of the observed values in the
/// same instance and channel, falling back to the channel mean over the
/// whole file, then to zero.
fn impute_missing(rows: &mut [(usize, Vec<Vec<f64>>, String)], channels: usize) {
    let mut totals = vec![(0.0, 0usize); channels];
    for (_, chs, _) in rows.iter() {
        for (c, ch) in chs.iter().enumerate() {
            for &v in ch.iter().filter(|v| !v.is_nan()) {
                totals[c].0 += v;
                totals[c].1 += 1;
            }
        }
    }
    for (_, chs, _) in rows.iter_mut() {
        for (c, ch) in chs.iter_mut().enumerate() {
            if !ch.iter().any(|v| v.is_nan()) {
                continue;
            }
            let (s, n) = ch
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
            let fill = if n > 0 {
                s / n as f64
            } else if totals[c].1 > 0 {
                totals[c].0 / totals[c].1 as f64
            } else {
                0.0
            };
            ch.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = fill);
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Re-indexes labels so that `class_names` matches `order`.
    pub fn remap_labels(&mut self, order: &[String]) -> Result<()> {
        let map = self
            .class_names
            .iter()
            .map(|n| {
                order
                    .iter()
                    .position(|o| o == n)
                    .ok_or_else(|| Error::UnknownLabel { label: n.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        for inst in &mut self.instances {
            inst.label = map[inst.label];
        }
        self.class_names = order.to_vec();
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            instances: Vec::new(),
            num_channels: self.num_channels,
            series_length: self.series_length,
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    pub fn pad_to_multiple(&self, m: usize) -> Dataset {
        let instances: Vec<Instance> = self
            .instances
            .iter()
            .map(|i| i.pad_to_multiple(self.num_channels, m))
            .collect();
        let series_length = instances
            .first()
            .map_or(self.series_length, |i| i.len(self.num_channels));
        Dataset {
            instances,
            series_length,
            ..self.clone_header()
        }
    }

    /// Per-channel population mean and standard deviation over every
    /// instance and timestamp.
    pub fn channel_stats(&self) -> NormStats {
        let (c, l) = (self.num_channels, self.series_length);
        let n = (self.instances.len() * l).max(1) as f64;
        let mut mean = vec![0.0; c];
        for inst in &self.instances {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += inst.channel(ch, l).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for inst in &self.instances {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += inst.channel(ch, l).iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        NormStats { mean, std }
    }

    /// Z-scores every channel. Pass the training stats when normalizing
    /// a test split.
    pub fn z_normalize(&self, stats: Option<&NormStats>) -> (Dataset, NormStats) {
        let stats = stats.cloned().unwrap_or_else(|| self.channel_stats());
        let l = self.series_length;
        let mut out = self.clone();
        for inst in &mut out.instances {
            for (i, v) in inst.values.iter_mut().enumerate() {
                let ch = i / l;
                *v = (*v - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR);
            }
        }
        (out, stats)
    }

    /// Seeded, stratified split; returns `(kept, held_out)`.
    pub fn stratified_split(&self, held_out_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut keep, mut hold) = (Vec::new(), Vec::new());
        for class in 0..self.num_classes() {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.instances[i].label == class)
                .collect();
            members.shuffle(&mut rng);
            let k = ((members.len() as f64) * held_out_frac).round() as usize;
            let k = k.min(members.len().saturating_sub(1));
            hold.extend_from_slice(&members[..k]);
            keep.extend_from_slice(&members[k..]);
        }
        keep.sort_unstable();
        hold.sort_unstable();
        (self.subset(&keep), self.subset(&hold))
    }

    /// Stacks the given instances into a `[B, C, L]` tensor.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let per = self.num_channels * self.series_length;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.instances[i].values);
        }
        Tensor::new(vec![indices.len(), self.num_channels, self.series_length], data)
            .expect("instances conform to the dataset shape")
    }

    /// Writes the dataset back out in `.ts` form.
    pub fn to_ts_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "@problemName {}", self.name);
        let _ = writeln!(s, "@timeStamps false");
        let _ = writeln!(s, "@missing false");
        let _ = writeln!(s, "@univariate {}", self.num_channels == 1);
        let _ = writeln!(s, "@dimensions {}", self.num_channels);
        let _ = writeln!(s, "@equalLength true");
        let _ = writeln!(s, "@seriesLength {}", self.series_length);
        let _ = writeln!(s, "@classLabel true {}", self.class_names.join(" "));
        let _ = writeln!(s, "@data");
        let l = self.series_length;
        for inst in &self.instances {
            for c in 0..self.num_channels {
                let vals: Vec<String> = inst.channel(c, l).iter().map(f64::to_string).collect();
                s.push_str(&vals.join(","));
                s.push(':');
            }
            s.push_str(&self.class_names[inst.label]);
            s.push('\n');
        }
        s
    }
}

/// Z-normalizes both splits with the training statistics and pads them
/// to a multiple of `width`.
pub fn prepare(train: &Dataset, test: &Dataset, width: usize) -> (Dataset, Dataset, NormStats) {
    let (tr, stats) = train.z_normalize(None);
    let (te, _) = test.z_normalize(Some(&stats));
    (tr.pad_to_multiple(width), te.pad_to_multiple(width), stats)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Batches in a seeded random order (or file order without `shuffle`).
/// The final partial batch is emitted as-is.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            x: self.ds.stack(&indices),
            y: indices.iter().map(|&i| self.ds.instances[i].label).collect(),
            indices,
        })
    }
}
