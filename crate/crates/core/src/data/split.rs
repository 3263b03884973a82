use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Frame indices assigned to training and validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle, then the first `⌈fraction·n⌉` items train and the rest
/// validate. The training share is clamped to `[1, n − 1]` so neither side
/// is empty.
pub fn split_train_val<T: Clone>(items: &[T], fraction: f64, rng: &mut Rng) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("split needs at least 2 items, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    // The small offset keeps products like 0.8·300 from rounding up past an
    // exact integer.
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..k]), pick(&order[k..])))
}

/// Writes `train`/`val` lines of space-separated indices.
pub fn write_split(path: &Path, split: &Split) -> Result<()> {
    let line = |tag: &str, v: &[usize]| {
        let ix: Vec<String> = v.iter().map(usize::to_string).collect();
        format!("{tag} {}\n", ix.join(" "))
    };
    let text = line("train", &split.train) + &line("val", &split.val);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut tokens = line.split_whitespace();
        let target = match tokens.next() {
            Some("train") => &mut split.train,
            Some("val") => &mut split.val,
            other => {
                return Err(Error::Data(format!("{}: unexpected line tag {other:?}", path.display())));
            }
        };
        for t in tokens {
            target.push(
                t.parse()
                    .map_err(|_| Error::Data(format!("{}: bad frame index {t:?}", path.display())))?,
            );
        }
    }
    Ok(split)
}
