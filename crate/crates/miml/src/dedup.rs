//! Exact (MD5) and near-duplicate (pHash) detection.

use std::collections::HashSet;
use std::sync::Mutex;

use md5::{Digest, Md5};
use miml_core::image::ImageTensor;
use miml_core::phash::{hamming, phash};

pub const DEFAULT_RADIUS: u32 = 4;

/// MD5 over `width (u32 LE) ‖ height (u32 LE) ‖ interleaved RGB8 pixels`,
/// so re-encoding a file losslessly does not change the digest.
pub fn image_md5(image: &ImageTensor) -> [u8; 16] {
    let (h, w) = image.size();
    let mut hasher = Md5::new();
    hasher.update((w as u32).to_le_bytes());
    hasher.update((h as u32).to_le_bytes());
    hasher.update(image.to_rgb8());
    hasher.finalize().into()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DedupOutcome {
    Inserted,
    DuplicateMd5,
    /// Perceptual match at the given Hamming distance.
    NearDuplicate(u32),
}

impl DedupOutcome {
    pub fn is_duplicate(&self) -> bool {
        !matches!(self, DedupOutcome::Inserted)
    }
}

#[derive(Default)]
struct Entries {
    md5: HashSet<[u8; 16]>,
    phash: Vec<u64>,
}

/// Thread-safe index; each check-and-insert is one critical section.
pub struct DedupIndex {
    radius: u32,
    entries: Mutex<Entries>,
}

impl Default for DedupIndex {
    fn default() -> Self {
        Self::new(DEFAULT_RADIUS)
    }
}

impl DedupIndex {
    pub fn new(radius: u32) -> Self {
        Self { radius, entries: Mutex::new(Entries::default()) }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("dedup lock").md5.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_insert_hashes(&self, md5: [u8; 16], phash: u64) -> DedupOutcome {
        let mut e = self.entries.lock().expect("dedup lock");
        if e.md5.contains(&md5) {
            return DedupOutcome::DuplicateMd5;
        }
        if let Some(d) = e.phash.iter().map(|&p| hamming(p, phash)).filter(|&d| d <= self.radius).min() {
            return DedupOutcome::NearDuplicate(d);
        }
        e.md5.insert(md5);
        e.phash.push(phash);
        DedupOutcome::Inserted
    }

    pub fn check_insert(&self, image: &ImageTensor) -> DedupOutcome {
        self.check_insert_hashes(image_md5(image), phash(image))
    }
}
