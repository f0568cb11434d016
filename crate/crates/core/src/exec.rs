//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches row
//! loops onto rayon. Without it, or with [`Exec::Sequential`], the same
//! closures run on the calling thread. Kernels only parallelize over
//! independent output rows and combine partial reductions in index order, so
//! results are bit-identical under either policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn label(self) -> &'static str {
        if self.is_parallel() {
            "parallel"
        } else {
            "sequential"
        }
    }

    /// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    /// Evaluates `f` for `0..n` and returns the results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
