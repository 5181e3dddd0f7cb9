//! Filesystem, configuration and command layer over `anatgraph-core`.
//!
//! The core crate is `no_std` and works on byte buffers and in-memory
//! structures; everything that touches files, JSON, CSV or process exit codes
//! lives here. Integration tests drive the same command functions the binary
//! dispatches to.

pub mod commands;
pub mod config;
pub mod iofs;

pub use anatgraph_core as core;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes: 0 ok, 2 config/validation, 3 I/O or format, 4 numeric.
pub fn exit_code_for(err: &anatgraph_core::Error) -> u8 {
    use anatgraph_core::Error;
    match err {
        Error::NonFinite { .. } | Error::Convergence { .. } => 4,
        Error::Format { .. } | Error::Sink { .. } => 3,
        Error::Shape { .. } | Error::Degenerate { .. } | Error::Config { .. } => 2,
    }
}

/// Run closures over the items on up to `workers` threads, preserving order.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = if workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        workers
    };
    let n = items.len();
    if workers <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    let mut iter = items.into_iter();
    loop {
        let piece: Vec<T> = iter.by_ref().take(chunk).collect();
        if piece.is_empty() {
            break;
        }
        chunks.push(piece);
    }
    let f = &f;
    let mut out: Vec<Vec<R>> = Vec::with_capacity(chunks.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|piece| scope.spawn(move || piece.into_iter().map(f).collect::<Vec<R>>()))
            .collect();
        for h in handles {
            out.push(h.join().expect("worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let doubled = parallel_map(items.clone(), 4, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let serial = parallel_map(items, 1, |x| x * 2);
        assert_eq!(doubled, serial);
    }
}
