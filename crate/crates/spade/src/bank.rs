//! Fixed-capacity FIFO queues of momentum embeddings with their
//! template-space footprints.
//!
//! Two banks exist at training time: a global one over embedding vectors
//! and a local one over flattened spatial embeddings. Entries are
//! reference-counted so cohort snapshots stay cheap and immutable while the
//! training loop keeps enqueueing.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};
use crate::patch::{patch_iou, TemplateFootprint};

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// One enqueued embedding: unit-norm values (flattened for spatial
/// tensors), the producing crop's template footprint, and a monotone age.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub embedding: Arc<Vec<f32>>,
    pub footprint: TemplateFootprint,
    pub age: u64,
}

impl BankEntry {
    pub fn iou_with(&self, anchor: &TemplateFootprint) -> f64 {
        patch_iou(&self.footprint, anchor)
    }
}

fn check_unit_norm(values: &[f32]) -> Result<()> {
    let norm2: f64 = values.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let norm = norm2.sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(SpadeError::Validation(format!(
            "bank entries must be unit-norm, got ||e|| = {norm}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    next_age: u64,
    /// Embedding length, fixed by the first enqueued entry.
    dim: Option<usize>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SpadeError::Parameter("bank capacity must be >= 1".into()));
        }
        Ok(MemoryBank { capacity, entries: VecDeque::new(), next_age: 0, dim: None })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.dim
    }

    /// Append entries in order, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, new_entries: Vec<(Vec<f32>, TemplateFootprint)>) -> Result<()> {
        for (values, footprint) in new_entries {
            check_unit_norm(&values)?;
            if let Some(d) = self.dim {
                if values.len() != d {
                    return Err(SpadeError::Shape(format!(
                        "bank embedding length {} does not match established {}",
                        values.len(),
                        d
                    )));
                }
            } else {
                self.dim = Some(values.len());
            }
            self.entries.push_back(BankEntry {
                embedding: Arc::new(values),
                footprint,
                age: self.next_age,
            });
            self.next_age += 1;
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// An immutable copy of the current contents; later enqueues do not
    /// affect it.
    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot { entries: self.entries.iter().cloned().collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Serialize: one JSON header line, then for each entry its age (LE
    /// u64), footprint corner+size (6 LE f64), and embedding (LE f32).
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = BankHeader {
            capacity: self.capacity,
            entry_count: self.entries.len(),
            embedding_dim: self.dim.unwrap_or(0),
            next_age: self.next_age,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            w.write_all(&e.age.to_le_bytes())?;
            for v in e.footprint.corner.iter().chain(e.footprint.size.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in e.embedding.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: BankHeader = serde_json::from_str(line.trim_end())?;
        let mut bank = MemoryBank::new(header.capacity)?;
        bank.next_age = header.next_age;
        if header.embedding_dim > 0 {
            bank.dim = Some(header.embedding_dim);
        }
        for _ in 0..header.entry_count {
            let mut buf8 = [0u8; 8];
            r.read_exact(&mut buf8)?;
            let age = u64::from_le_bytes(buf8);
            let mut f = [0f64; 6];
            for v in f.iter_mut() {
                r.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            let mut emb = vec![0f32; header.embedding_dim];
            let mut buf4 = [0u8; 4];
            for v in emb.iter_mut() {
                r.read_exact(&mut buf4)?;
                *v = f32::from_le_bytes(buf4);
            }
            bank.entries.push_back(BankEntry {
                embedding: Arc::new(emb),
                footprint: TemplateFootprint::new([f[0], f[1], f[2]], [f[3], f[4], f[5]])?,
                age,
            });
        }
        Ok(bank)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    capacity: usize,
    entry_count: usize,
    embedding_dim: usize,
    next_age: u64,
}

/// Immutable view of a bank taken at cohort-construction time.
#[derive(Debug, Clone, Default)]
pub struct BankSnapshot {
    pub entries: Vec<BankEntry>,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact two-way partition by template-space overlap with the anchor:
    /// entries with `IoU <= o` land in `below` (kept as negatives), the
    /// rest in `above`. Queue order is preserved within each part.
    pub fn partition_by_overlap(
        &self,
        anchor: &TemplateFootprint,
        o: f64,
    ) -> Result<(Vec<BankEntry>, Vec<BankEntry>)> {
        if !(0.0..=1.0).contains(&o) {
            return Err(SpadeError::Parameter(format!("overlap threshold must be in [0, 1], got {o}")));
        }
        let mut below = Vec::new();
        let mut above = Vec::new();
        for e in &self.entries {
            if e.iou_with(anchor) <= o {
                below.push(e.clone());
            } else {
                above.push(e.clone());
            }
        }
        Ok((below, above))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(corner: [f64; 3], size: [f64; 3]) -> TemplateFootprint {
        TemplateFootprint::new(corner, size).unwrap()
    }

    fn unit(dim: usize, lead: f32) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[0] = lead.signum();
        v
    }

    fn entry_ids(entries: &[BankEntry]) -> Vec<u64> {
        entries.iter().map(|e| e.age).collect()
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut bank = MemoryBank::new(3).unwrap();
        for _ in 0..3 {
            bank.enqueue(vec![(unit(4, 1.0), fp([0.0; 3], [1.0; 3]))]).unwrap();
        }
        assert_eq!(entry_ids(&bank.snapshot().entries), vec![0, 1, 2]);
        bank.enqueue(vec![(unit(4, 1.0), fp([0.0; 3], [1.0; 3]))]).unwrap();
        assert_eq!(entry_ids(&bank.snapshot().entries), vec![1, 2, 3]);
    }

    #[test]
    fn enqueue_into_empty_keeps_order() {
        let mut bank = MemoryBank::new(10).unwrap();
        bank.enqueue(vec![
            (unit(4, 1.0), fp([0.0; 3], [1.0; 3])),
            (unit(4, 1.0), fp([1.0; 3], [1.0; 3])),
            (unit(4, 1.0), fp([2.0; 3], [1.0; 3])),
        ])
        .unwrap();
        assert_eq!(entry_ids(&bank.snapshot().entries), vec![0, 1, 2]);
    }

    #[test]
    fn oversized_batch_keeps_newest() {
        let mut bank = MemoryBank::new(2).unwrap();
        bank.enqueue((0..5).map(|_| (unit(4, 1.0), fp([0.0; 3], [1.0; 3]))).collect()).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(entry_ids(&bank.snapshot().entries), vec![3, 4]);
    }

    #[test]
    fn non_unit_embedding_rejected() {
        let mut bank = MemoryBank::new(2).unwrap();
        let err = bank.enqueue(vec![(vec![0.5, 0.5], fp([0.0; 3], [1.0; 3]))]);
        assert!(matches!(err, Err(SpadeError::Validation(_))));
    }

    #[test]
    fn size_is_min_of_capacity_and_total() {
        for cap in 1..=5 {
            for total in 0..=12 {
                let mut bank = MemoryBank::new(cap).unwrap();
                for _ in 0..total {
                    bank.enqueue(vec![(unit(2, 1.0), fp([0.0; 3], [1.0; 3]))]).unwrap();
                }
                assert_eq!(bank.len(), cap.min(total));
            }
        }
    }

    #[test]
    fn snapshot_is_immutable_under_enqueue() {
        let mut bank = MemoryBank::new(2).unwrap();
        bank.enqueue(vec![(unit(4, 1.0), fp([0.0; 3], [1.0; 3]))]).unwrap();
        let snap = bank.snapshot();
        bank.enqueue(vec![
            (unit(4, 1.0), fp([9.0; 3], [1.0; 3])),
            (unit(4, 1.0), fp([9.0; 3], [1.0; 3])),
        ])
        .unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap.entries[0].age, 0);
    }

    #[test]
    fn partition_exhaustive_oracle() {
        // Bank IoUs {0.0, 0.1, 0.3, 0.9} against the anchor, o = 0.2.
        let anchor = fp([0.0; 3], [10.0; 3]);
        let mk = |iou: f64| -> TemplateFootprint {
            if iou == 0.0 {
                return fp([100.0; 3], [10.0; 3]);
            }
            // Slide a same-size box along x: iou = (10-s)/(10+s).
            let s = 10.0 * (1.0 - iou) / (1.0 + iou);
            fp([0.0, 0.0, s], [10.0; 3])
        };
        let mut bank = MemoryBank::new(10).unwrap();
        for iou in [0.0, 0.1, 0.3, 0.9] {
            bank.enqueue(vec![(unit(2, 1.0), mk(iou))]).unwrap();
        }
        let (below, above) = bank.snapshot().partition_by_overlap(&anchor, 0.2).unwrap();
        assert_eq!(entry_ids(&below), vec![0, 1]);
        assert_eq!(entry_ids(&above), vec![2, 3]);
        // Filter oracle over the four entries.
        for e in &below {
            assert!(e.iou_with(&anchor) <= 0.2 + 1e-12);
        }
        for e in &above {
            assert!(e.iou_with(&anchor) > 0.2);
        }
    }

    #[test]
    fn partition_threshold_one_and_zero() {
        let anchor = fp([0.0; 3], [10.0; 3]);
        let mut bank = MemoryBank::new(10).unwrap();
        bank.enqueue(vec![
            (unit(2, 1.0), fp([0.0; 3], [10.0; 3])),  // identical: iou 1
            (unit(2, 1.0), fp([3.0, 0.0, 0.0], [10.0; 3])),
            (unit(2, 1.0), fp([50.0; 3], [10.0; 3])), // disjoint
        ])
        .unwrap();
        let snap = bank.snapshot();
        // o = 1: IoU > 1 impossible, only nothing lands above; the identical
        // footprint has IoU exactly 1 which is <= 1.
        let (below, above) = snap.partition_by_overlap(&anchor, 1.0).unwrap();
        assert_eq!(below.len(), 3);
        assert!(above.is_empty());
        // o = 0 with disjoint anchor catches everything into below.
        let far = fp([500.0; 3], [10.0; 3]);
        let (below, above) = snap.partition_by_overlap(&far, 0.0).unwrap();
        assert_eq!(below.len(), 3);
        assert!(above.is_empty());
        // Boundary: IoU exactly o stays below.
        let (below, _) = snap.partition_by_overlap(&anchor, 1.0).unwrap();
        assert!(below.iter().any(|e| (e.iou_with(&anchor) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn partition_rejects_bad_threshold() {
        let bank = MemoryBank::new(2).unwrap();
        let anchor = fp([0.0; 3], [1.0; 3]);
        assert!(matches!(
            bank.snapshot().partition_by_overlap(&anchor, 1.5),
            Err(SpadeError::Parameter(_))
        ));
    }

    #[test]
    fn partition_preserves_queue_order_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let mut bank = MemoryBank::new(32).unwrap();
            let n = rng.gen_range(1..20);
            for _ in 0..n {
                let corner = [rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)];
                let size = [rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0)];
                bank.enqueue(vec![(unit(2, 1.0), fp(corner, size))]).unwrap();
            }
            let anchor = fp(
                [rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)],
                [rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0)],
            );
            let o = rng.gen_range(0.0..1.0);
            let (below, above) = bank.snapshot().partition_by_overlap(&anchor, o).unwrap();
            assert_eq!(below.len() + above.len(), bank.len());
            // Disjointness and exactness of the predicate.
            for e in &below {
                assert!(e.iou_with(&anchor) <= o);
            }
            for e in &above {
                assert!(e.iou_with(&anchor) > o);
            }
            // Stability: ages strictly increase within each part.
            for part in [&below, &above] {
                for w in part.windows(2) {
                    assert!(w[0].age < w[1].age);
                }
            }
        }
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let mut bank = MemoryBank::new(5).unwrap();
        let mut e = vec![0.0f32; 8];
        let inv = 1.0 / (8.0f32).sqrt();
        for v in e.iter_mut() {
            *v = inv;
        }
        for i in 0..7 {
            bank.enqueue(vec![(e.clone(), fp([i as f64, 0.25, -1.5], [2.0, 3.0, 4.0]))]).unwrap();
        }
        bank.write(&path).unwrap();
        let back = MemoryBank::read(&path).unwrap();
        assert_eq!(back.len(), bank.len());
        assert_eq!(back.capacity(), bank.capacity());
        for (a, b) in bank.iter().zip(back.iter()) {
            assert_eq!(a.age, b.age);
            assert_eq!(a.footprint, b.footprint);
            assert_eq!(*a.embedding, *b.embedding);
        }
        let path2 = dir.path().join("bank2.bin");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
