use std::path::{Path, PathBuf};

use super::{load_and_preprocess, Charset, DataError, LineSample, ResizeMode};

const HEADER_PREFIX: &str = "#gfcn-manifest v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    pub transcript: String,
}

/// One split: a header line `#gfcn-manifest v1 split=<name> charset=<path>`
/// followed by `image<TAB>transcript` records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub charset: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_file_string(&self) -> Result<String, DataError> {
        let bad = |what: &str| DataError::Manifest { path: PathBuf::new(), line: 1, reason: what.to_string() };
        if self.split.contains(char::is_whitespace) || self.split.is_empty() {
            return Err(bad("split name must be a single non-empty word"));
        }
        let charset = self.charset.to_str().ok_or_else(|| bad("charset path is not UTF-8"))?;
        if charset.contains(char::is_whitespace) {
            return Err(bad("charset path contains whitespace"));
        }
        let mut s = format!("{HEADER_PREFIX} split={} charset={charset}\n", self.split);
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            let fail = |reason: &str| DataError::Manifest { path: PathBuf::new(), line, reason: reason.into() };
            let image = r.image.to_str().ok_or_else(|| fail("image path is not UTF-8"))?;
            if image.contains(['\t', '\n']) || r.transcript.contains(['\t', '\n', '\r']) {
                return Err(fail("tab or newline inside a field"));
            }
            s.push_str(&format!("{image}\t{}\n", r.transcript));
        }
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let fail = |line: usize, reason: String| DataError::Manifest { path: path.to_path_buf(), line, reason };
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or("").trim_end_matches('\r');
        let rest = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| fail(1, format!("expected header starting {HEADER_PREFIX:?}")))?;
        let (mut split, mut charset) = (None, None);
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("split", v)) => split = Some(v.to_string()),
                Some(("charset", v)) => charset = Some(PathBuf::from(v)),
                _ => return Err(fail(1, format!("unknown header field {field:?}"))),
            }
        }
        let split = split.ok_or_else(|| fail(1, "header lacks split=".into()))?;
        let charset = charset.ok_or_else(|| fail(1, "header lacks charset=".into()))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let (image, transcript) =
                line.split_once('\t').ok_or_else(|| fail(line_no, "expected image<TAB>transcript".into()))?;
            if image.is_empty() {
                return Err(fail(line_no, "empty image path".into()));
            }
            records.push(ManifestRecord { image: image.into(), transcript: transcript.to_string() });
        }
        Ok(Self { split, charset, records })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = self.to_file_string().map_err(|e| match e {
            DataError::Manifest { line, reason, .. } => DataError::Manifest { path: path.to_path_buf(), line, reason },
            e => e,
        })?;
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }

    /// Charset path resolved against the manifest's directory.
    pub fn charset_path(&self, manifest_path: &Path) -> PathBuf {
        resolve(manifest_path, &self.charset)
    }
}

fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Samples ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub samples: Vec<LineSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a manifest and every image it names, validating transcripts and CTC
/// feasibility up front. Errors carry the manifest line.
pub fn load_dataset(
    manifest_path: &Path,
    charset: &Charset,
    target_height: usize,
    mode: ResizeMode,
) -> Result<Dataset, DataError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let path = resolve(manifest_path, &r.image);
        let at_line = |e: DataError| DataError::Manifest {
            path: manifest_path.to_path_buf(),
            line: i + 2,
            reason: e.to_string(),
        };
        let image = load_and_preprocess(&path, target_height, mode).map_err(at_line)?;
        samples.push(LineSample::new(r.image.display().to_string(), image, &r.transcript, charset).map_err(at_line)?);
    }
    Ok(Dataset { split: manifest.split, samples })
}
