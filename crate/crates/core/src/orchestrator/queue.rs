//! Time-ordered event queue. Events at equal timestamps pop in insertion
//! order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::OrchestratorError;
use crate::timebase::TimestampNs;

#[derive(Debug)]
struct Entry<E> {
    t: TimestampNs,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.seq) == (other.t, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
    now: TimestampNs,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0, now: TimestampNs::ZERO }
    }

    pub fn now(&self) -> TimestampNs {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, t: TimestampNs, event: E) -> Result<(), OrchestratorError> {
        if t < self.now {
            return Err(OrchestratorError::Scheduling { now: self.now, t });
        }
        self.heap.push(Reverse(Entry { t, seq: self.seq, event }));
        self.seq += 1;
        Ok(())
    }

    /// Pop the earliest event and move the clock to it.
    pub fn pop(&mut self) -> Option<(TimestampNs, E)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.t;
        Some((e.t, e.event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(TimestampNs(5), "b").unwrap();
        q.schedule(TimestampNs(3), "a").unwrap();
        q.schedule(TimestampNs(5), "c").unwrap();
        q.schedule(TimestampNs(5), "d").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn past_scheduling_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(TimestampNs(10), ()).unwrap();
        q.pop();
        assert!(matches!(q.schedule(TimestampNs(9), ()), Err(OrchestratorError::Scheduling { .. })));
        q.schedule(TimestampNs(10), ()).unwrap();
    }

    #[test]
    fn empty_queue_pops_nothing() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert!(q.pop().is_none());
        assert_eq!(q.now(), TimestampNs::ZERO);
    }
}
