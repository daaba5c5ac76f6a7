//! Order-preserving parallel reduction over fixed-size chunks.

use rayon::prelude::*;

/// Applies `f` to consecutive chunks of `items` (passing each chunk's first
/// index) and folds the results left to right with `combine`. The chunking
/// and fold order do not depend on `parallel` or on the thread count.
pub fn chunked_fold<E, A, Err, F, C>(
    items: &[E],
    chunk: usize,
    parallel: bool,
    f: F,
    mut combine: C,
) -> Result<Option<A>, Err>
where
    E: Sync,
    A: Send,
    Err: Send,
    F: Fn(usize, &[E]) -> Result<A, Err> + Sync,
    C: FnMut(&mut A, A),
{
    let chunk = chunk.max(1);
    let parts: Vec<Result<A, Err>> = if parallel {
        items
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, xs)| f(c * chunk, xs))
            .collect()
    } else {
        items
            .chunks(chunk)
            .enumerate()
            .map(|(c, xs)| f(c * chunk, xs))
            .collect()
    };
    let mut acc: Option<A> = None;
    for part in parts {
        let part = part?;
        match &mut acc {
            None => acc = Some(part),
            Some(a) => combine(a, part),
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_fixed() {
        let xs: Vec<u32> = (0..10).collect();
        let f = |start: usize, c: &[u32]| Ok::<_, ()>(vec![(start, c.len())]);
        let cat = |a: &mut Vec<(usize, usize)>, b: Vec<(usize, usize)>| a.extend(b);
        let seq = chunked_fold(&xs, 3, false, f, cat).unwrap();
        let par = chunked_fold(&xs, 3, true, f, cat).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.unwrap(), [(0, 3), (3, 3), (6, 3), (9, 1)]);
        assert!(chunked_fold(&xs[..0], 3, true, f, cat).unwrap().is_none());
    }
}
