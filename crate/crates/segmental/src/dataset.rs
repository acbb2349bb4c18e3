//! Dataset directories:
//!
//! ```text
//! <root>/alphabet.txt
//! <root>/collapse.txt          optional evaluation map
//! <root>/<split>/text          id<TAB>labels
//! <root>/<split>/segments      optional, `id label start end`
//! <root>/<split>/feats/<id>.segf
//! ```

use std::collections::HashMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use segmental_core::model::{segments_to_frames, Utterance};

use crate::formats::{
    read_collapse_map, read_features, read_segmentations, read_transcripts, write_features, write_segmentations,
    write_transcripts, Alphabet,
};
use crate::normalize::normalize_sequence;

/// Environment variable naming the directory relative data paths resolve
/// against.
pub const DATA_ROOT_VAR: &str = "SEGMENTAL_DATA";

/// Resolves `path` against `$SEGMENTAL_DATA` when it is relative and the
/// variable is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match env::var_os(DATA_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub collapse: Option<Vec<usize>>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.utterances.as_slice())
            .with_context(|| format!("dataset has no split {name:?}"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        self.alphabet.write(&dir.join("alphabet.txt"))?;
        for split in &self.splits {
            let sdir = dir.join(&split.name);
            let fdir = sdir.join("feats");
            fs::create_dir_all(&fdir).with_context(|| fdir.display().to_string())?;
            let mut text = Vec::new();
            let mut segs = Vec::new();
            for u in &split.utterances {
                write_features(&fdir.join(format!("{}.segf", u.id)), &u.features)?;
                text.push((u.id.clone(), u.labels.clone()));
                if let Some(s) = &u.segments {
                    segs.push((u.id.clone(), s.clone()));
                }
            }
            write_transcripts(&sdir.join("text"), &text, &self.alphabet)?;
            if !segs.is_empty() {
                write_segmentations(&sdir.join("segments"), &segs, &self.alphabet)?;
            }
        }
        Ok(())
    }
}

pub fn read_alphabet(root: &Path) -> Result<Alphabet> {
    Ok(Alphabet::read(&root.join("alphabet.txt"))?)
}

pub fn read_collapse(root: &Path, alphabet: &Alphabet) -> Result<Option<Vec<usize>>> {
    let path = root.join("collapse.txt");
    if path.exists() {
        Ok(Some(read_collapse_map(&path, alphabet)?))
    } else {
        Ok(None)
    }
}

/// Loads one split, optionally normalizing each sequence's features.
pub fn load_split(root: &Path, name: &str, alphabet: &Alphabet, normalize: bool) -> Result<Vec<Utterance>> {
    let sdir = root.join(name);
    let transcripts = read_transcripts(&sdir.join("text"), alphabet)?;
    let seg_path = sdir.join("segments");
    let mut segs: HashMap<String, Vec<(usize, usize, usize)>> = if seg_path.exists() {
        read_segmentations(&seg_path, alphabet)?.into_iter().collect()
    } else {
        HashMap::new()
    };
    let mut out = Vec::with_capacity(transcripts.len());
    for (id, labels) in transcripts {
        let mut features = read_features(&sdir.join("feats").join(format!("{id}.segf")))?;
        let segments = segs.remove(&id);
        if let Some(s) = &segments {
            segments_to_frames(s, features.rows())
                .map_err(|e| anyhow::anyhow!("{id}: segmentation does not tile the utterance: {e}"))?;
            if !s.iter().map(|seg| seg.0).eq(labels.iter().copied()) {
                bail!("{id}: segmentation labels disagree with the transcript");
            }
        }
        if normalize {
            features = normalize_sequence(&features);
        }
        out.push(Utterance {
            id,
            features,
            labels,
            segments,
        });
    }
    if let Some(id) = segs.keys().next() {
        bail!("segments given for unknown utterance {id}");
    }
    Ok(out)
}

/// Loads every named split.
pub fn load(root: &Path, splits: &[&str], normalize: bool) -> Result<Dataset> {
    let alphabet = read_alphabet(root)?;
    let collapse = read_collapse(root, &alphabet)?;
    let splits = splits
        .iter()
        .map(|&name| {
            Ok(Split {
                name: name.to_string(),
                utterances: load_split(root, name, &alphabet, normalize)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        alphabet,
        collapse,
        splits,
    })
}
