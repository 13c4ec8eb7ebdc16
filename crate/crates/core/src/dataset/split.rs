use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::index::{DatasetIndex, Sample};
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config(format!("split ratios {ratios:?} must all be positive")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} sum to {sum}, not 1")));
    }
    Ok(())
}

/// Largest-remainder allocation of `n` items over `ratios`: every count is
/// within one item of `ratio * n` and the counts sum to `n`.
pub fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * n as f64);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    // stable sort keeps split order as the tie-break
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - counts[a] as f64;
        let fb = ideal[b] - counts[b] as f64;
        fb.total_cmp(&fa)
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split: each class is shuffled with one seeded generator (classes
/// in label order) and cut according to [`allocate`]. Index lists are sorted.
pub fn split_dataset(index: &DatasetIndex, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    split_labels(&index.labels(), &index.class_names, ratios, seed)
}

pub fn split_labels(labels: &[usize], class_names: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    check_ratios(ratios)?;
    let k = class_names.len();
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < 3 {
            return Err(Error::Data(format!(
                "class {:?} has {} samples; at least 3 are needed to populate train/val/test",
                class_names[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), ratios);
        let mut rest = members.as_slice();
        for (part, count) in parts.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(count);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(SplitAssignment {
        train,
        val,
        test,
        ratios,
        seed,
    })
}

/// On-disk form of a split: paths relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitFile {
    pub fn new(index: &DatasetIndex, split: &SplitAssignment) -> Self {
        let pick = |ids: &[usize]| ids.iter().map(|&i| index.samples[i].clone()).collect();
        Self {
            seed: split.seed,
            ratios: split.ratios,
            class_names: index.class_names.clone(),
            train: pick(&split.train),
            val: pick(&split.val),
            test: pick(&split.test),
        }
    }

    /// Reassembles an index rooted at `root` and the matching assignment.
    pub fn resolve(&self, root: &Path) -> Result<(DatasetIndex, SplitAssignment)> {
        let k = self.class_names.len();
        let mut samples = Vec::with_capacity(self.train.len() + self.val.len() + self.test.len());
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (part, list) in parts.iter_mut().zip([&self.train, &self.val, &self.test]) {
            for s in list {
                if s.label >= k {
                    return Err(Error::LabelOutOfRange {
                        label: s.label,
                        classes: k,
                    });
                }
                part.push(samples.len());
                samples.push(s.clone());
            }
        }
        let [train, val, test] = parts;
        Ok((
            DatasetIndex {
                root: root.to_path_buf(),
                samples,
                class_names: self.class_names.clone(),
            },
            SplitAssignment {
                train,
                val,
                test,
                ratios: self.ratios,
                seed: self.seed,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| i.to_string()).collect()
    }

    fn balanced(k: usize, per: usize) -> Vec<usize> {
        (0..k * per).map(|i| i % k).collect()
    }

    #[test]
    fn full_corpus_counts() {
        let s = split_labels(&balanced(10, 2000), &names(10), DEFAULT_RATIOS, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14000, 3000, 3000));
    }

    #[test]
    fn exact_division() {
        let s = split_labels(&[0; 10], &names(1), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn allocation_of_seven() {
        assert_eq!(allocate(7, DEFAULT_RATIOS), [5, 1, 1]);
    }

    #[test]
    fn small_class_is_named() {
        let err = split_labels(&[0, 0, 0, 1, 1], &["big".into(), "tiny".into()], DEFAULT_RATIOS, 1).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }

    #[test]
    fn bad_ratios() {
        assert!(check_ratios([0.7, 0.2, 0.2]).is_err());
        assert!(check_ratios([1.0, 0.0, 0.0]).is_err());
        assert!(check_ratios([0.6, 0.3, 0.1]).is_ok());
    }

    #[test]
    fn split_file_round_trip() {
        let index = DatasetIndex {
            root: PathBuf::from("/data"),
            samples: (0..9)
                .map(|i| Sample {
                    path: PathBuf::from(format!("{}/{i}.png", i % 3)),
                    label: i % 3,
                })
                .collect(),
            class_names: names(3),
        };
        let split = split_dataset(&index, DEFAULT_RATIOS, 3).unwrap();
        let file = SplitFile::new(&index, &split);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        file.save(&path).unwrap();
        let back = SplitFile::load(&path).unwrap();
        assert_eq!(back, file);
        let (idx2, split2) = back.resolve(Path::new("/data")).unwrap();
        for (a, b) in split.parts().iter().zip(split2.parts()) {
            let pa: Vec<_> = a.iter().map(|&i| &index.samples[i]).collect();
            let pb: Vec<_> = b.iter().map(|&i| &idx2.samples[i]).collect();
            assert_eq!(pa, pb);
        }
    }

    proptest! {
        #[test]
        fn partition_and_stratification(
            sizes in proptest::collection::vec(3usize..60, 1..6),
            seed in any::<u64>(),
            a in 0.05f64..0.9,
            b in 0.05f64..0.9,
        ) {
            let total = a + b + 1.0;
            let ratios = [a / total, b / total, 1.0 / total];
            let ratios = [ratios[0], ratios[1], 1.0 - ratios[0] - ratios[1]];
            let mut labels = Vec::new();
            for (k, &n) in sizes.iter().enumerate() {
                labels.extend(std::iter::repeat_n(k, n));
            }
            let s = split_labels(&labels, &names(sizes.len()), ratios, seed).unwrap();

            let mut seen = vec![0u8; labels.len()];
            for part in s.parts() {
                for &i in part {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));

            for (k, &n) in sizes.iter().enumerate() {
                for (part, r) in s.parts().iter().zip(ratios) {
                    let got = part.iter().filter(|&&i| labels[i] == k).count() as f64;
                    prop_assert!((got - r * n as f64).abs() <= 1.0);
                }
            }
            prop_assert_eq!(split_labels(&labels, &names(sizes.len()), ratios, seed).unwrap(), s);
        }
    }
}
