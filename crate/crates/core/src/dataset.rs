//! UEA `.ts` corpus loading, per-channel z-normalization and corpus statistics.
//!
//! Only equal-length, untimestamped classification corpora are supported.
//! Series are stored as one `N x T x F` array (series, timestep, channel).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Result, TfecError};

/// Channels whose population standard deviation falls below this are zeroed.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MtsDataset {
    pub name: String,
    /// `N x T x F`.
    pub samples: Array3<f64>,
    /// Dense labels in `0..class_count`, present only for labelled corpora.
    pub labels: Option<Vec<usize>>,
    /// Original label strings, indexed by dense label.
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    pub class_count: Option<usize>,
}

impl MtsDataset {
    /// Builds a dataset from raw parts, checking label bounds and finiteness.
    pub fn new(
        name: impl Into<String>,
        samples: Array3<f64>,
        labels: Option<Vec<usize>>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = samples.len_of(Axis(0));
        if n == 0 {
            return Err(TfecError::UnsupportedCorpus("corpus has no series".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(TfecError::Numeric("corpus contains non-finite values".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(TfecError::Shape(format!(
                    "{} labels for {} series",
                    labels.len(),
                    n
                )));
            }
            let k = match &class_names {
                Some(names) => names.len(),
                None => labels.iter().max().map_or(0, |m| m + 1),
            };
            if labels.iter().any(|&l| l >= k) {
                return Err(TfecError::Shape("label outside class range".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
            labels,
            class_names,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len_of(Axis(0))
    }

    pub fn t(&self) -> usize {
        self.samples.len_of(Axis(1))
    }

    pub fn f(&self) -> usize {
        self.samples.len_of(Axis(2))
    }

    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref()?;
        match &self.class_names {
            Some(names) => Some(names.len()),
            None => self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1)),
        }
    }

    /// One series as a `T x F` view.
    pub fn series(&self, i: usize) -> ArrayView2<'_, f64> {
        self.samples.index_axis(Axis(0), i)
    }

    pub fn stats(&self) -> DatasetStats {
        stats(self)
    }

    /// Canonical `.ts` text. Values use the shortest round-trip decimal form,
    /// so re-parsing the output reproduces the samples bit for bit.
    pub fn to_ts_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "@problemName {}", self.name);
        let _ = writeln!(out, "@timeStamps false");
        let _ = writeln!(out, "@missing false");
        let _ = writeln!(out, "@univariate {}", self.f() == 1);
        if self.f() > 1 {
            let _ = writeln!(out, "@dimensions {}", self.f());
        }
        let _ = writeln!(out, "@equalLength true");
        let _ = writeln!(out, "@seriesLength {}", self.t());
        let names = self.label_strings();
        match &names {
            Some((declared, _)) => {
                let _ = writeln!(out, "@classLabel true {}", declared.join(" "));
            }
            None => {
                let _ = writeln!(out, "@classLabel false");
            }
        }
        let _ = writeln!(out, "@data");
        for i in 0..self.n() {
            let series = self.series(i);
            let channels: Vec<String> = series
                .axis_iter(Axis(1))
                .map(|ch| {
                    ch.iter()
                        .map(|v| format!("{v:?}"))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect();
            out.push_str(&channels.join(":"));
            if let Some((_, per_series)) = &names {
                out.push(':');
                out.push_str(&per_series[i]);
            }
            out.push('\n');
        }
        out
    }

    fn label_strings(&self) -> Option<(Vec<String>, Vec<String>)> {
        let labels = self.labels.as_ref()?;
        let declared: Vec<String> = match &self.class_names {
            Some(names) => names.clone(),
            None => (0..self.class_count().unwrap_or(0))
                .map(|k| k.to_string())
                .collect(),
        };
        let per_series = labels.iter().map(|&l| declared[l].clone()).collect();
        Some((declared, per_series))
    }
}

const KNOWN_TAGS: &[&str] = &[
    "problemname",
    "timestamps",
    "missing",
    "univariate",
    "dimension",
    "dimensions",
    "equallength",
    "serieslength",
    "classlabel",
    "targetlabel",
    "data",
];

fn parse_err(line: usize, message: impl Into<String>) -> TfecError {
    TfecError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: usize, tag: &str, value: Option<&str>) -> Result<bool> {
    match value.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(parse_err(
            line,
            format!("@{tag} expects true/false, got {other:?}"),
        )),
    }
}

/// Parses UEA `.ts` text into an equal-length corpus.
///
/// Labels are remapped to dense integers in order of first appearance in the
/// data section; classes declared in the header but never used are appended
/// after the observed ones.
pub fn parse_ts(text: &str) -> Result<MtsDataset> {
    let mut name: Option<String> = None;
    let mut has_labels = false;
    let mut declared_classes: Vec<String> = Vec::new();
    let mut declared_dims: Option<usize> = None;
    let mut in_data = false;

    let mut t_len: Option<usize> = None;
    let mut f_len: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(rest) = line.strip_prefix('@') else {
                return Err(parse_err(line_no, "expected a header tag before @data"));
            };
            let mut parts = rest.split_whitespace();
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            if !KNOWN_TAGS.contains(&tag.as_str()) {
                return Err(parse_err(line_no, format!("unknown header tag @{tag}")));
            }
            let value = parts.next();
            match tag.as_str() {
                "problemname" => {
                    name = Some(
                        value
                            .ok_or_else(|| parse_err(line_no, "@problemName needs a value"))?
                            .to_string(),
                    )
                }
                "timestamps" => {
                    if parse_bool(line_no, &tag, value)? {
                        return Err(TfecError::UnsupportedCorpus(
                            "timestamped series are not supported".into(),
                        ));
                    }
                }
                "targetlabel" => {
                    if parse_bool(line_no, &tag, value)? {
                        return Err(TfecError::UnsupportedCorpus(
                            "regression targets are not supported".into(),
                        ));
                    }
                }
                "missing" | "univariate" | "equallength" => {
                    parse_bool(line_no, &tag, value)?;
                }
                "dimension" | "dimensions" => {
                    let d = value
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| parse_err(line_no, "@dimensions expects an integer"))?;
                    declared_dims = Some(d);
                }
                "serieslength" => {
                    value
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| parse_err(line_no, "@seriesLength expects an integer"))?;
                }
                "classlabel" => {
                    has_labels = parse_bool(line_no, &tag, value)?;
                    declared_classes = parts.map(str::to_string).collect();
                    if has_labels && declared_classes.is_empty() {
                        return Err(parse_err(line_no, "@classLabel true lists no classes"));
                    }
                }
                "data" => in_data = true,
                _ => unreachable!(),
            }
            continue;
        }

        let mut fields: Vec<&str> = line.split(':').collect();
        if has_labels {
            if fields.len() < 2 {
                return Err(parse_err(line_no, "series has no class label field"));
            }
            let label = fields.pop().unwrap_or_default().trim();
            raw_labels.push(label.to_string());
        }
        let f = fields.len();
        match f_len {
            None => {
                if let Some(d) = declared_dims {
                    if d != f {
                        return Err(parse_err(
                            line_no,
                            format!("@dimensions {d} but series has {f} channels"),
                        ));
                    }
                }
                f_len = Some(f);
            }
            Some(expected) if expected != f => {
                return Err(parse_err(
                    line_no,
                    format!("series has {f} channels, expected {expected}"),
                ));
            }
            _ => {}
        }

        let mut channels: Vec<Vec<f64>> = Vec::with_capacity(f);
        for field in &fields {
            let mut channel = Vec::new();
            for tok in field.split(',') {
                let tok = tok.trim();
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("invalid value {tok:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line_no, format!("non-finite value {tok:?}")));
                }
                channel.push(v);
            }
            channels.push(channel);
        }
        let t = channels[0].len();
        if channels.iter().any(|c| c.len() != t) {
            return Err(parse_err(line_no, "ragged channel lengths within one series"));
        }
        match t_len {
            None => t_len = Some(t),
            Some(expected) if expected != t => {
                return Err(TfecError::UnsupportedCorpus(format!(
                    "variable-length series (line {line_no}: length {t}, expected {expected})"
                )));
            }
            _ => {}
        }
        for step in 0..t {
            for channel in &channels {
                values.push(channel[step]);
            }
        }
    }

    if !in_data {
        return Err(parse_err(text.lines().count().max(1), "missing @data section"));
    }
    let (Some(t), Some(f)) = (t_len, f_len) else {
        return Err(TfecError::UnsupportedCorpus("corpus has no series".into()));
    };
    let n = values.len() / (t * f);
    let samples = Array3::from_shape_vec((n, t, f), values)
        .map_err(|e| TfecError::Shape(e.to_string()))?;

    let (labels, class_names) = if has_labels {
        let (labels, names) = densify_labels(&raw_labels, &declared_classes)?;
        (Some(labels), Some(names))
    } else {
        (None, None)
    };
    MtsDataset::new(
        name.unwrap_or_else(|| "unnamed".into()),
        samples,
        labels,
        class_names,
    )
}

fn densify_labels(raw: &[String], declared: &[String]) -> Result<(Vec<usize>, Vec<String>)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(raw.len());
    for label in raw {
        if !declared.iter().any(|d| d == label) {
            return Err(TfecError::UnsupportedCorpus(format!(
                "class label {label:?} not declared in @classLabel"
            )));
        }
        let next = index.len();
        let id = *index.entry(label.as_str()).or_insert_with(|| {
            names.push(label.clone());
            next
        });
        labels.push(id);
    }
    for d in declared {
        if !names.contains(d) {
            names.push(d.clone());
        }
    }
    Ok((labels, names))
}

/// Reads and parses one `.ts` file.
pub fn load_ts(path: &Path) -> Result<MtsDataset> {
    if !path.exists() {
        return Err(TfecError::NotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| TfecError::io(format!("reading {}", path.display()), e))?;
    parse_ts(&text).map_err(|e| TfecError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Loads a corpus file. With `merge_splits`, a `*_TRAIN.ts` / `*_TEST.ts`
/// file is concatenated with its sibling split when one exists.
pub fn load_corpus(path: &Path, merge_splits: bool) -> Result<MtsDataset> {
    let first = load_ts(path)?;
    if !merge_splits {
        return Ok(first);
    }
    match sibling_split(path) {
        Some(other) if other.exists() => {
            let second = load_ts(&other)?;
            concat(&first, &second)
        }
        _ => Ok(first),
    }
}

fn sibling_split(path: &Path) -> Option<PathBuf> {
    let file = path.file_name()?.to_str()?;
    let swapped = if let Some(stem) = file.strip_suffix("_TRAIN.ts") {
        format!("{stem}_TEST.ts")
    } else if let Some(stem) = file.strip_suffix("_TEST.ts") {
        format!("{stem}_TRAIN.ts")
    } else {
        return None;
    };
    Some(path.with_file_name(swapped))
}

/// Concatenates two corpora with identical `T` and `F`, re-densifying labels
/// by class name.
pub fn concat(a: &MtsDataset, b: &MtsDataset) -> Result<MtsDataset> {
    if a.t() != b.t() || a.f() != b.f() {
        return Err(TfecError::UnsupportedCorpus(format!(
            "cannot merge {}x{} with {}x{} series",
            a.t(),
            a.f(),
            b.t(),
            b.f()
        )));
    }
    let samples = ndarray::concatenate(Axis(0), &[a.samples.view(), b.samples.view()])
        .map_err(|e| TfecError::Shape(e.to_string()))?;
    let (labels, names) = match (a.label_strings(), b.label_strings()) {
        (Some((da, la)), Some((db, lb))) => {
            let mut declared = da;
            for d in db {
                if !declared.contains(&d) {
                    declared.push(d);
                }
            }
            let raw: Vec<String> = la.into_iter().chain(lb).collect();
            let (labels, names) = densify_labels(&raw, &declared)?;
            (Some(labels), Some(names))
        }
        _ => (None, None),
    };
    MtsDataset::new(a.name.clone(), samples, labels, names)
}

/// Rescales every (series, channel) to zero mean and unit population
/// standard deviation. Channels with std below [`DEGENERATE_STD`] become zero.
pub fn znormalize(ds: &MtsDataset) -> MtsDataset {
    let mut out = ds.clone();
    for mut series in out.samples.axis_iter_mut(Axis(0)) {
        for mut channel in series.axis_iter_mut(Axis(1)) {
            let t = channel.len() as f64;
            let mean = channel.sum() / t;
            let var = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            let std = var.sqrt();
            if std < DEGENERATE_STD {
                channel.fill(0.0);
            } else {
                channel.mapv_inplace(|v| (v - mean) / std);
            }
        }
    }
    out
}

pub fn stats(ds: &MtsDataset) -> DatasetStats {
    DatasetStats {
        n: ds.n(),
        t: ds.t(),
        f: ds.f(),
        class_count: ds.class_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TWO_SERIES: &str = "\
# comment
@problemName Tiny
@timeStamps false
@univariate true
@classLabel true a b
@data
1.0,2.0,3.0:a
4.0,5.0,6.0:b
";

    #[test]
    fn parses_minimal_labelled_file() {
        let ds = parse_ts(TWO_SERIES).unwrap();
        assert_eq!(ds.name, "Tiny");
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.f(), 1);
        assert_eq!(ds.class_count(), Some(2));
        assert_eq!(ds.labels, Some(vec![0, 1]));
        assert_eq!(ds.samples[[1, 2, 0]], 6.0);
    }

    #[test]
    fn labels_follow_first_appearance() {
        let text = "@classLabel true x y z\n@data\n1,2:z\n3,4:x\n5,6:z\n";
        let ds = parse_ts(text).unwrap();
        assert_eq!(ds.labels, Some(vec![0, 1, 0]));
        assert_eq!(
            ds.class_names,
            Some(vec!["z".to_string(), "x".to_string(), "y".to_string()])
        );
        assert_eq!(ds.class_count(), Some(3));
    }

    #[test]
    fn multivariate_layout_is_series_time_channel() {
        let text = "@dimensions 2\n@classLabel false\n@data\n1,2,3:10,20,30\n";
        let ds = parse_ts(text).unwrap();
        assert_eq!((ds.n(), ds.t(), ds.f()), (1, 3, 2));
        assert_eq!(ds.samples[[0, 1, 0]], 2.0);
        assert_eq!(ds.samples[[0, 1, 1]], 20.0);
        assert!(ds.labels.is_none());
        assert_eq!(ds.class_count(), None);
    }

    #[test]
    fn variable_length_is_unsupported() {
        let text = "@classLabel false\n@data\n1,2,3\n1,2,3,4\n";
        assert!(matches!(
            parse_ts(text),
            Err(TfecError::UnsupportedCorpus(_))
        ));
    }

    #[test]
    fn ragged_channels_report_line() {
        let text = "@classLabel false\n@data\n1,2,3:1,2\n";
        match parse_ts(text) {
            Err(TfecError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tag_reports_line() {
        let text = "@problemName X\n@bogus 1\n@data\n1,2\n";
        match parse_ts(text) {
            Err(TfecError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(parse_ts("@classLabel false\n@data\n").is_err());
        assert!(parse_ts("@classLabel false\n").is_err());
    }

    #[test]
    fn missing_values_rejected() {
        let text = "@classLabel false\n@data\n1,?,3\n";
        assert!(matches!(parse_ts(text), Err(TfecError::Parse { .. })));
    }

    #[test]
    fn undeclared_label_rejected() {
        let text = "@classLabel true a\n@data\n1,2:b\n";
        assert!(parse_ts(text).is_err());
    }

    #[test]
    fn znormalize_analytic_channel() {
        let ds = parse_ts("@classLabel false\n@data\n1,2,3:5,5,5\n").unwrap();
        let z = znormalize(&ds);
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (t, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(z.samples[[0, t, 0]], *e, epsilon = 1e-6);
            assert_eq!(z.samples[[0, t, 1]], 0.0);
        }
    }

    #[test]
    fn znormalize_random_corpus_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = Array3::from_shape_fn((10, 50, 3), |_| rng.random_range(-5.0..20.0));
        let ds = MtsDataset::new("r", samples, None, None).unwrap();
        let z = znormalize(&ds);
        for series in z.samples.axis_iter(Axis(0)) {
            for ch in series.axis_iter(Axis(1)) {
                let mean = ch.sum() / 50.0;
                let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
                assert!(mean.abs() < 1e-9);
                assert!((std - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn merge_splits_concatenates_siblings() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("X_TRAIN.ts"),
            "@classLabel true a b\n@data\n1,2:a\n3,4:b\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("X_TEST.ts"),
            "@classLabel true a b\n@data\n5,6:b\n",
        )
        .unwrap();
        let train = dir.path().join("X_TRAIN.ts");
        assert_eq!(load_corpus(&train, false).unwrap().n(), 2);
        let merged = load_corpus(&train, true).unwrap();
        assert_eq!(merged.n(), 3);
        assert_eq!(merged.labels, Some(vec![0, 1, 1]));
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            load_ts(Path::new("/nonexistent/file.ts")),
            Err(TfecError::NotFound(_))
        ));
    }

    fn corpus_strategy() -> impl Strategy<Value = MtsDataset> {
        (1usize..5, 1usize..6, 1usize..4, 1usize..4).prop_flat_map(|(n, t, f, k)| {
            (
                proptest::collection::vec(-1e6f64..1e6, n * t * f),
                proptest::collection::vec(0..k, n),
            )
                .prop_map(move |(values, labels)| {
                    let samples = Array3::from_shape_vec((n, t, f), values).unwrap();
                    let names = (0..k).map(|c| format!("c{c}")).collect();
                    MtsDataset::new("prop", samples, Some(labels), Some(names)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn canonical_text_round_trips_bitwise(ds in corpus_strategy()) {
            let back = parse_ts(&ds.to_ts_text()).unwrap();
            prop_assert_eq!(back.samples.shape(), ds.samples.shape());
            for (a, b) in back.samples.iter().zip(ds.samples.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let names_back: Vec<String> = back.labels.as_ref().unwrap().iter()
                .map(|&l| back.class_names.as_ref().unwrap()[l].clone()).collect();
            let names: Vec<String> = ds.labels.as_ref().unwrap().iter()
                .map(|&l| ds.class_names.as_ref().unwrap()[l].clone()).collect();
            prop_assert_eq!(names_back, names);
        }

        #[test]
        fn znormalize_is_idempotent(ds in corpus_strategy()) {
            let once = znormalize(&ds);
            let twice = znormalize(&once);
            for (a, b) in once.samples.iter().zip(twice.samples.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
