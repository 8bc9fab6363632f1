use std::time::{Duration, Instant};

use bytes::Bytes;

use crate::error::Result;
use crate::runtime::{ObjectRef, Runtime};

/// One consumed output, in completion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Consumed<T> {
    /// Position of the ref in the input slice.
    pub index: usize,
    pub value: T,
    /// Time from the call until this output was handed to the consumer.
    pub elapsed: Duration,
}

/// Hands each output to `consumer` as soon as it is ready instead of
/// waiting for all of them. Errors from a failed object or the consumer
/// stop consumption.
pub fn pipelined_consume<T>(
    rt: &Runtime,
    refs: &[ObjectRef],
    mut consumer: impl FnMut(usize, Bytes) -> Result<T>,
) -> Result<Vec<Consumed<T>>> {
    let start = Instant::now();
    let mut pending: Vec<(usize, ObjectRef)> = refs.iter().cloned().enumerate().collect();
    let mut out = Vec::with_capacity(refs.len());
    while !pending.is_empty() {
        let watch: Vec<ObjectRef> = pending.iter().map(|(_, r)| r.clone()).collect();
        let res = rt.wait(&watch, 1, None)?;
        let ready: std::collections::HashSet<_> = res.ready.iter().map(|r| r.id()).collect();
        let mut rest = Vec::with_capacity(pending.len());
        for (i, r) in pending {
            if ready.contains(&r.id()) {
                let value = consumer(i, rt.get(&r, None)?)?;
                out.push(Consumed {
                    index: i,
                    value,
                    elapsed: start.elapsed(),
                });
            } else {
                rest.push((i, r));
            }
        }
        pending = rest;
    }
    Ok(out)
}
