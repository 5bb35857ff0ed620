//! File-backed persistence: a content-addressed PNG cache plus append-only
//! JSON-lines logs for sessions and bookmarks.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tessera_core::palette::{Palette, PaletteFormat};
use tessera_core::recolor::RecolorOptions;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt record in {file} line {line}: {source}")]
    Corrupt {
        file: String,
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    /// Content hash of the uploaded PNG.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub created_ms: u64,
}

/// Extraction settings a palette was (or will be) served with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceKey {
    pub format: PaletteFormat,
    pub k: usize,
    pub grid: usize,
    pub seed: u64,
    pub n_superpixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bookmark {
    pub id: String,
    pub session_id: String,
    pub palette: Palette,
    pub options: RecolorOptions,
    pub source: SourceKey,
    /// Content hash of the recolored PNG.
    pub result: String,
    pub created_ms: u64,
    /// Creation order, used for newest-first listing.
    pub seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum BookmarkEvent {
    Put { bookmark: Bookmark },
    Delete { id: String },
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
            file: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(value).expect("records serialize");
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("images"))?;
        Ok(Self { root })
    }

    fn image_path(&self, hash: &str) -> PathBuf {
        self.root.join("images").join(format!("{hash}.png"))
    }

    /// Stores PNG bytes under their hash; returns the hash.
    pub fn put_image(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = content_hash(bytes);
        let path = self.image_path(&hash);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn get_image(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        Ok(fs::read(self.image_path(hash))?)
    }

    pub fn sessions(&self) -> Result<Vec<SessionRecord>, StoreError> {
        read_jsonl(&self.root.join("sessions.jsonl"))
    }

    pub fn add_session(&self, rec: &SessionRecord) -> Result<(), StoreError> {
        append_jsonl(&self.root.join("sessions.jsonl"), rec)
    }

    /// Live bookmarks after replaying the log, in creation order.
    pub fn bookmarks(&self) -> Result<Vec<Bookmark>, StoreError> {
        let mut live: Vec<Bookmark> = Vec::new();
        for ev in read_jsonl::<BookmarkEvent>(&self.root.join("bookmarks.jsonl"))? {
            match ev {
                BookmarkEvent::Put { bookmark } => live.push(bookmark),
                BookmarkEvent::Delete { id } => live.retain(|b| b.id != id),
            }
        }
        live.sort_by_key(|b| b.seq);
        Ok(live)
    }

    pub fn put_bookmark(&self, b: &Bookmark) -> Result<(), StoreError> {
        append_jsonl(
            &self.root.join("bookmarks.jsonl"),
            &BookmarkEvent::Put { bookmark: b.clone() },
        )
    }

    pub fn delete_bookmark(&self, id: &str) -> Result<(), StoreError> {
        append_jsonl(
            &self.root.join("bookmarks.jsonl"),
            &BookmarkEvent::Delete { id: id.to_string() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tessera_core::palette::Palette1D;
    use tessera_core::RgbColor;

    fn bookmark(id: &str, seq: u64) -> Bookmark {
        Bookmark {
            id: id.into(),
            session_id: "s".into(),
            palette: Palette::Uniform(Palette1D {
                k: 4,
                colors: vec![RgbColor::new(1, 2, 3)],
            }),
            options: RecolorOptions::default(),
            source: SourceKey {
                format: PaletteFormat::Uniform,
                k: 4,
                grid: 5,
                seed: 0,
                n_superpixels: 256,
            },
            result: "00".into(),
            created_ms: 0,
            seq,
        }
    }

    #[test]
    fn bookmark_log_replays_deletes() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_bookmark(&bookmark("a", 1)).unwrap();
        store.put_bookmark(&bookmark("b", 2)).unwrap();
        store.delete_bookmark("a").unwrap();
        let reopened = Store::open(dir.path()).unwrap();
        let live = reopened.bookmarks().unwrap();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0], bookmark("b", 2));
    }

    #[test]
    fn images_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let h1 = store.put_image(b"abc").unwrap();
        let h2 = store.put_image(b"abc").unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(store.get_image(&h1).unwrap(), b"abc");
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        fs::write(dir.path().join("sessions.jsonl"), "{not json}\n").unwrap();
        assert!(matches!(store.sessions(), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
