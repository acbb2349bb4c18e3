//! On-disk formats: binary feature matrices, text transcripts and
//! segmentations, the label alphabet and the evaluation collapse map.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use segmental_core::math::Mat;
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"SEGF";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}: not a feature file")]
    BadMagic(String),
    #[error("{path}: unsupported version {version}")]
    Version { path: String, version: u16 },
    #[error("{path}: expected {expected} payload bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{0}: non-finite feature value")]
    NonFinite(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Serializes a `T x d` matrix as `SEGF`, version, `T`, `d`, then `f32`
/// values, all little-endian.
pub fn encode_features(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * m.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Mat> {
    if bytes.len() < 14 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FormatError::BadMagic(origin.into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(FormatError::Version {
            path: origin.into(),
            version,
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[14..];
    let expected = 4 * rows * cols;
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            path: origin.into(),
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(origin.into()));
    }
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn write_features(path: &Path, m: &Mat) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_features(&bytes, &path.display().to_string())
}

/// Label tokens in id order, one per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new(tokens: Vec<String>) -> std::result::Result<Self, String> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(format!("invalid token {t:?}"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Alphabet { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let tokens = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Alphabet::new(tokens).map_err(|msg| parse_err(path, 0, msg))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn encode(&self, tokens: &[&str]) -> std::result::Result<Vec<usize>, String> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| format!("unknown label {t:?}")))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// `id<TAB>tok tok ...` lines, in file order.
pub type Transcripts = Vec<(String, Vec<usize>)>;

pub fn read_transcripts(path: &Path, alphabet: &Alphabet) -> Result<Transcripts> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        let tokens: Vec<&str> = rest.split_whitespace().collect();
        let labels = alphabet.encode(&tokens).map_err(|m| parse_err(path, n + 1, m))?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, entries: &[(String, Vec<usize>)], alphabet: &Alphabet) -> Result<()> {
    let mut text = String::new();
    for (id, labels) in entries {
        text.push_str(id);
        text.push('\t');
        text.push_str(&alphabet.decode(labels).join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub type Segmentation = Vec<(usize, usize, usize)>;

/// One segment per line, `id label start end`, grouped by utterance in
/// file order. Each utterance's segments must tile `[0, T)` without gaps
/// or overlaps; `T` is checked later against the features.
pub fn read_segmentations(path: &Path, alphabet: &Alphabet) -> Result<Vec<(String, Segmentation)>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out: Vec<(String, Segmentation)> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [id, label, start, end] = fields[..] else {
            return Err(parse_err(path, n + 1, "expected `id label start end`"));
        };
        let label = alphabet.id(label).ok_or_else(|| parse_err(path, n + 1, format!("unknown label {label:?}")))?;
        let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(path, n + 1, e.to_string()));
        let (start, end) = (num(start)?, num(end)?);
        if end <= start {
            return Err(parse_err(path, n + 1, "segment end must follow its start"));
        }
        match out.last_mut() {
            Some((last, segs)) if last == id => {
                let prev_end = segs.last().map_or(0, |s| s.2);
                if start != prev_end {
                    return Err(parse_err(
                        path,
                        n + 1,
                        format!("segment starts at {start} but the previous one ends at {prev_end}"),
                    ));
                }
                segs.push((label, start, end));
            }
            _ => {
                if out.iter().any(|(u, _)| u == id) {
                    return Err(parse_err(path, n + 1, format!("segments of {id} are not contiguous")));
                }
                if start != 0 {
                    return Err(parse_err(path, n + 1, "first segment must start at 0"));
                }
                out.push((id.to_string(), vec![(label, start, end)]));
            }
        }
    }
    Ok(out)
}

pub fn write_segmentations(path: &Path, entries: &[(String, Segmentation)], alphabet: &Alphabet) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for (id, segs) in entries {
        for &(l, s, t) in segs {
            writeln!(f, "{id} {} {s} {t}", alphabet.token(l)).map_err(io_err(path))?;
        }
    }
    f.flush().map_err(io_err(path))
}

/// `token target` lines; the result maps every label id to an evaluation
/// class id. Targets need not be in the alphabet; unlisted tokens map to
/// their own class.
pub fn read_collapse_map(path: &Path, alphabet: &Alphabet) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut classes: Vec<String> = alphabet.tokens().to_vec();
    let mut target_of: Vec<String> = alphabet.tokens().to_vec();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [from, to] = fields[..] else {
            return Err(parse_err(path, n + 1, "expected `token target`"));
        };
        let id = alphabet.id(from).ok_or_else(|| parse_err(path, n + 1, format!("unknown label {from:?}")))?;
        target_of[id] = to.to_string();
        if !classes.iter().any(|c| c == to) {
            classes.push(to.to_string());
        }
    }
    Ok(target_of
        .iter()
        .map(|t| classes.iter().position(|c| c == t).unwrap())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alphabet() -> Alphabet {
        Alphabet::new(["a", "b", "c"].map(String::from).to_vec()).unwrap()
    }

    #[test]
    fn feature_bytes_layout() {
        let m = Mat::from_vec(2, 1, vec![1.0, -2.5]);
        let b = encode_features(&m);
        assert_eq!(&b[..4], b"SEGF");
        assert_eq!(b.len(), 14 + 8);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(decode_features(&b, "x").unwrap(), m);
        assert!(matches!(decode_features(&b[..20], "x"), Err(FormatError::Truncated { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad, "x"), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let mut b = encode_features(&Mat::from_vec(1, 1, vec![0.0]));
        b[14..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&b, "x"), Err(FormatError::NonFinite(_))));
    }

    #[test]
    fn segmentation_must_tile() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg");
        let a = alphabet();
        fs::write(&p, "u1 a 0 2\nu1 b 2 5\nu2 c 0 1\n").unwrap();
        let segs = read_segmentations(&p, &a).unwrap();
        assert_eq!(segs[0].1, vec![(0, 0, 2), (1, 2, 5)]);
        for bad in ["u1 a 0 2\nu1 b 3 5\n", "u1 a 0 2\nu1 b 1 5\n", "u1 a 1 2\n", "u1 a 2 2\n", "u1 a 0 1\nu2 a 0 1\nu1 a 1 2\n"] {
            fs::write(&p, bad).unwrap();
            assert!(read_segmentations(&p, &a).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn collapse_map_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map");
        fs::write(&p, "c a\n").unwrap();
        assert_eq!(read_collapse_map(&p, &alphabet()).unwrap(), vec![0, 1, 0]);
        fs::write(&p, "a x\nb x\n").unwrap();
        assert_eq!(read_collapse_map(&p, &alphabet()).unwrap(), vec![3, 3, 2]);
    }
}
