//! Tiny deterministic fan-out helper. With one worker items run in order on
//! the calling thread; with more, scoped threads stride over the items and
//! results land back in input order, so outputs are identical either way.

pub fn run_parallel<T, R, F>(workers: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let indexed: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let mut buckets: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in indexed {
        buckets[i % workers].push((i, item));
    }
    let f = &f;
    let results: Vec<Vec<(usize, R)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|bucket| {
                scope.spawn(move || {
                    bucket
                        .into_iter()
                        .map(|(i, item)| (i, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for chunk in results {
        for (i, r) in chunk {
            slots[i] = Some(r);
        }
    }
    slots.into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let items: Vec<usize> = (0..37).collect();
        let a = run_parallel(1, items.clone(), |x| x * 2);
        let b = run_parallel(4, items, |x| x * 2);
        assert_eq!(a, b);
        assert_eq!(a[5], 10);
    }
}
