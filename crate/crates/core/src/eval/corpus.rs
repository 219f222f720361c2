//! Labelled corpora laid out as one sub-directory of PGM files per category.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ids::ImageId;
use crate::image::{read_pgm, write_pgm, GrayImage};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub id: ImageId,
    pub category: String,
    /// Index of the owner holding this image.
    pub owner: usize,
    pub image: GrayImage,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub items: Vec<LabeledImage>,
    pub categories: Vec<String>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Reassigns owners round-robin in item order.
    pub fn assign_owners(&mut self, owners: usize) {
        let owners = owners.max(1);
        for (i, item) in self.items.iter_mut().enumerate() {
            item.owner = i % owners;
        }
    }

    pub fn owner_items(&self, owner: usize) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |i| i.owner == owner)
    }

    /// Writes `<root>/<category>/<stem>.pgm` for every item, where the stem
    /// is the image id with its `<category>.` prefix removed.
    pub fn write_to(&self, root: &Path) -> Result<(), EvalError> {
        for item in &self.items {
            write_item(root, item)?;
        }
        Ok(())
    }
}

/// Writes query images the same way as corpus items.
pub fn write_images(root: &Path, images: &[LabeledImage]) -> Result<(), EvalError> {
    images.iter().try_for_each(|item| write_item(root, item))
}

fn write_item(root: &Path, item: &LabeledImage) -> Result<(), EvalError> {
    let dir = root.join(&item.category);
    fs::create_dir_all(&dir)?;
    let id = item.id.as_str();
    let stem = id
        .strip_prefix(&format!("{}.", item.category))
        .unwrap_or(id);
    fs::write(dir.join(format!("{stem}.pgm")), write_pgm(&item.image, false))?;
    Ok(())
}

/// A file that could not be ingested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestIssue {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub corpus: LabeledCorpus,
    pub warnings: Vec<String>,
}

/// Reads every `*.pgm` under the category sub-directories of `root`.
///
/// Categories and files are visited in byte order of their names, and
/// owners are assigned round-robin in that order. Image ids are
/// `<category>.<file stem>` with characters outside `[A-Za-z0-9._-]`
/// replaced by `_`. Any unreadable or malformed file fails the whole load
/// with the full list of problems.
pub fn load_corpus(root: &Path, owners: usize) -> Result<LoadedCorpus, EvalError> {
    let mut issues = Vec::new();
    let mut corpus = LabeledCorpus::default();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();

    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let category = sanitize(&dir.file_name().unwrap_or_default().to_string_lossy());
        let mut any = false;
        for path in sorted_entries(&dir)? {
            if path.is_dir() {
                continue;
            }
            if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
                issues.push(IngestIssue {
                    path,
                    reason: "not a .pgm file".into(),
                });
                continue;
            }
            let stem = sanitize(&path.file_stem().unwrap_or_default().to_string_lossy());
            let id = match ImageId::new(format!("{category}.{stem}")) {
                Ok(id) => id,
                Err(e) => {
                    issues.push(IngestIssue {
                        path,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            if !seen.insert(id.clone()) {
                issues.push(IngestIssue {
                    path,
                    reason: format!("image id {id} collides with another file"),
                });
                continue;
            }
            match fs::read(&path).map_err(|e| e.to_string()).and_then(|b| {
                read_pgm(&b).map_err(|e| e.to_string())
            }) {
                Ok(pgm) => {
                    any = true;
                    corpus.items.push(LabeledImage {
                        id,
                        category: category.clone(),
                        owner: 0,
                        image: pgm.image,
                    });
                }
                Err(reason) => issues.push(IngestIssue { path, reason }),
            }
        }
        if any {
            corpus.categories.push(category);
        }
    }
    if !issues.is_empty() {
        return Err(EvalError::Ingest(issues));
    }
    if corpus.is_empty() {
        warnings.push(format!("no images found under {}", root.display()));
    }
    corpus.assign_owners(owners);
    Ok(LoadedCorpus { corpus, warnings })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut out = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    s.trim_start_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: u8) -> GrayImage {
        GrayImage::from_fn(8, 8, |x, y| v ^ (x * y) as u8).unwrap()
    }

    fn build(root: &Path, cats: usize, per: usize) {
        for c in 0..cats {
            let dir = root.join(format!("cat{c}"));
            fs::create_dir_all(&dir).unwrap();
            for k in 0..per {
                fs::write(dir.join(format!("{k:03}.pgm")), write_pgm(&img(k as u8), false)).unwrap();
            }
        }
    }

    #[test]
    fn counts_and_round_robin_owners() {
        let dir = tempfile::tempdir().unwrap();
        build(dir.path(), 10, 100);
        let loaded = load_corpus(dir.path(), 3).unwrap();
        assert!(loaded.warnings.is_empty());
        let c = loaded.corpus;
        assert_eq!(c.len(), 1000);
        assert_eq!(c.categories.len(), 10);
        let sizes: Vec<usize> = (0..3).map(|o| c.owner_items(o).count()).collect();
        assert_eq!(sizes, [334, 333, 333]);
        assert_eq!(c.items[0].id.as_str(), "cat0.000");
        assert_eq!(c.items[999].id.as_str(), "cat9.099");
    }

    #[test]
    fn empty_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = load_corpus(dir.path(), 2).unwrap();
        assert!(loaded.corpus.is_empty());
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn bad_files_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        build(dir.path(), 1, 2);
        fs::write(dir.path().join("cat0/broken.pgm"), b"P2\n1 1\n255\n0").unwrap();
        fs::write(dir.path().join("cat0/notes.txt"), b"hello").unwrap();
        match load_corpus(dir.path(), 1) {
            Err(EvalError::Ingest(issues)) => {
                assert_eq!(issues.len(), 2);
                assert!(issues[0].path.ends_with("broken.pgm"));
                assert!(issues[1].path.ends_with("notes.txt"));
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = LabeledCorpus {
            items: (0..4)
                .map(|k| LabeledImage {
                    id: ImageId::new(format!("c{}.{k}", k % 2)).unwrap(),
                    category: format!("c{}", k % 2),
                    owner: 0,
                    image: img(k as u8),
                })
                .collect(),
            categories: vec!["c0".into(), "c1".into()],
        };
        corpus.write_to(dir.path()).unwrap();
        let back = load_corpus(dir.path(), 1).unwrap().corpus;
        assert_eq!(back.len(), 4);
        assert_eq!(back.categories, corpus.categories);
        for item in &corpus.items {
            let found = back.items.iter().find(|b| b.id == item.id).unwrap();
            assert_eq!(found.image, item.image);
            assert_eq!(found.category, item.category);
        }
    }
}
