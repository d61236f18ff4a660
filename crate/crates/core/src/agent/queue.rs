//! Bounded FIFO of origin-tagged records waiting for a stream.

use std::collections::VecDeque;

use bytes::Bytes;

use crate::mux::StreamLabel;

pub const DEFAULT_QUEUE_CAPACITY: usize = 65536;

#[derive(Debug, Clone)]
pub struct Pending {
    pub data: Bytes,
    /// Bytes already accepted by the stream.
    pub written: usize,
    /// Stream chosen for this record once its first byte is written.
    pub label: Option<StreamLabel>,
}

impl Pending {
    pub fn remaining(&self) -> &[u8] {
        &self.data[self.written..]
    }
}

/// FIFO per origin port; records of different origins never block each other.
#[derive(Debug)]
pub struct SendQueue {
    lanes: Vec<(u16, VecDeque<Pending>)>,
    len: usize,
    capacity: usize,
}

impl Default for SendQueue {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl SendQueue {
    pub fn new(capacity: usize) -> Self {
        Self { lanes: Vec::new(), len: 0, capacity }
    }

    /// Appends a record, or hands it back when the queue is full.
    pub fn push(&mut self, origin: u16, data: Bytes) -> Result<(), Bytes> {
        if self.len >= self.capacity {
            return Err(data);
        }
        let lane = match self.lanes.iter().position(|(o, _)| *o == origin) {
            Some(i) => i,
            None => {
                self.lanes.push((origin, VecDeque::new()));
                self.lanes.len() - 1
            }
        };
        self.lanes[lane].1.push_back(Pending { data, written: 0, label: None });
        self.len += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len_for(&self, origin: u16) -> usize {
        self.lanes.iter().find(|(o, _)| *o == origin).map_or(0, |(_, q)| q.len())
    }

    pub fn origins(&self) -> impl Iterator<Item = u16> + '_ {
        self.lanes.iter().filter(|(_, q)| !q.is_empty()).map(|(o, _)| *o)
    }

    /// Offers each lane's head records to `write`, which returns the bytes it
    /// accepted or `None` to stop that lane. Returns the number of records
    /// fully written and removed.
    pub fn drain_with(&mut self, mut write: impl FnMut(u16, &mut Pending) -> Option<usize>) -> usize {
        let mut done = 0;
        for (origin, lane) in self.lanes.iter_mut() {
            while let Some(head) = lane.front_mut() {
                if head.written == head.data.len() {
                    lane.pop_front();
                    done += 1;
                    continue;
                }
                match write(*origin, head) {
                    Some(n) if n > 0 => head.written += n,
                    _ => break,
                }
            }
        }
        self.len -= done;
        done
    }

    /// Forgets partial progress so every record is resent whole, e.g. on a
    /// new connection.
    pub fn reset_progress(&mut self) {
        for (_, lane) in self.lanes.iter_mut() {
            if let Some(head) = lane.front_mut() {
                head.written = 0;
                head.label = None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bounded() {
        let mut q = SendQueue::new(2);
        q.push(1, Bytes::from_static(b"a")).unwrap();
        q.push(2, Bytes::from_static(b"b")).unwrap();
        assert!(q.is_full());
        assert_eq!(q.push(1, Bytes::from_static(b"c")).unwrap_err(), Bytes::from_static(b"c"));
    }

    #[test]
    fn blocked_lane_does_not_block_other() {
        let mut q = SendQueue::default();
        q.push(1, Bytes::from_static(b"one")).unwrap();
        q.push(2, Bytes::from_static(b"two")).unwrap();
        let mut seen = Vec::new();
        let n = q.drain_with(|o, p| {
            if o == 1 {
                None
            } else {
                seen.push(p.remaining().to_vec());
                Some(p.remaining().len())
            }
        });
        assert_eq!(n, 1);
        assert_eq!(seen, vec![b"two".to_vec()]);
        assert_eq!(q.len_for(1), 1);
        assert_eq!(q.origins().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn partial_writes_resume_and_reset() {
        let mut q = SendQueue::default();
        q.push(1, Bytes::from_static(b"abcdef")).unwrap();
        assert_eq!(q.drain_with(|_, p| Some(p.remaining().len().min(2)).filter(|_| p.written < 4)), 0);
        q.drain_with(|_, p| {
            assert_eq!(p.remaining(), b"ef");
            None
        });
        q.reset_progress();
        assert_eq!(q.drain_with(|_, p| Some(p.remaining().len())), 1);
        assert!(q.is_empty());
    }

    proptest! {
        #[test]
        fn fifo_per_origin(ops in proptest::collection::vec((0u16..3, 1usize..20, 1usize..7), 1..200)) {
            let mut q = SendQueue::default();
            let mut expect: Vec<Vec<u8>> = vec![Vec::new(); 3];
            for (i, (origin, len, _)) in ops.iter().enumerate() {
                let data: Vec<u8> = (0..*len).map(|j| (i + j) as u8).collect();
                expect[*origin as usize].extend_from_slice(&data);
                q.push(*origin, Bytes::from(data)).unwrap();
            }
            let mut got: Vec<Vec<u8>> = vec![Vec::new(); 3];
            let mut chunk = ops.iter().map(|o| o.2).cycle();
            while !q.is_empty() {
                q.drain_with(|o, p| {
                    let n = p.remaining().len().min(chunk.next().unwrap());
                    got[o as usize].extend_from_slice(&p.remaining()[..n]);
                    Some(n)
                });
            }
            prop_assert_eq!(got, expect);
        }
    }
}
