use std::ops::Range;

/// Fixed number of gradient shards per batch. Results are reduced in shard
/// order, so sums do not depend on how many threads ran them.
pub const SHARDS: usize = 8;

pub const THREADS_ENV: &str = "CAPSTEXT_THREADS";

/// Worker count: `CAPSTEXT_THREADS` if set to a positive integer, else the
/// available parallelism, capped at [`SHARDS`].
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, usize::from);
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(avail);
    n.clamp(1, SHARDS)
}

/// Splits `0..n` into at most [`SHARDS`] contiguous, nearly equal ranges.
pub fn shard_ranges(n: usize) -> Vec<Range<usize>> {
    let parts = n.min(SHARDS);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = n / parts + usize::from(i < n % parts);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Runs `f` on every shard of `0..n` and returns the results in shard order.
pub fn map_shards<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync,
{
    let ranges = shard_ranges(n);
    let threads = threads.clamp(1, ranges.len().max(1));
    if threads == 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let f = &f;
    let ranges = &ranges;
    let mut tagged: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..ranges.len())
                        .step_by(threads)
                        .map(|i| (i, f(ranges[i].clone())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_input() {
        for n in [0, 1, 7, 8, 9, 50] {
            let r = shard_ranges(n);
            assert_eq!(r.iter().map(|r| r.len()).sum::<usize>(), n);
            assert!(r.len() <= SHARDS);
            assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        }
    }

    #[test]
    fn order_does_not_depend_on_threads() {
        let one = map_shards(50, 1, |r| r.map(|i| i as f64 * 0.1).sum::<f64>());
        let four = map_shards(50, 4, |r| r.map(|i| i as f64 * 0.1).sum::<f64>());
        assert_eq!(one, four);
    }
}
