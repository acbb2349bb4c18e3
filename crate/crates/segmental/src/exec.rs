//! Utterance-level parallelism with results returned in input order, so
//! gradient merging is deterministic regardless of thread count.

use std::thread;

use segmental_core::encoder::Mode;
use segmental_core::lattice::LabelId;
use segmental_core::model::{DecodeKind, Evaluated, Model, Objective, Partition, Utterance};
use segmental_core::training::{Executor, Sequential};
use segmental_core::Result;

#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Threaded {
            threads: threads.max(1),
        }
    }

    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        if self.threads == 1 || items.len() < 2 {
            return items.iter().map(f).collect();
        }
        let chunk = items.len().div_ceil(self.threads);
        thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|c| {
                    let f = &f;
                    s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }
}

impl Executor for Threaded {
    fn evaluate_batch(
        &self,
        model: &Model,
        batch: &[(&Utterance, Mode)],
        objective: &Objective,
        wrt: Partition,
    ) -> Vec<Result<Evaluated>> {
        if self.threads == 1 {
            return Sequential.evaluate_batch(model, batch, objective, wrt);
        }
        self.map(batch, |(u, mode)| model.evaluate(u, objective, *mode, wrt))
    }

    fn decode_batch(&self, model: &Model, utts: &[Utterance], kind: DecodeKind) -> Vec<Result<Vec<LabelId>>> {
        self.map(utts, |u| model.decode(&u.features, kind))
    }
}
