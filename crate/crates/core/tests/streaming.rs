//! Streams a million generated lines through the reader and checks that peak
//! heap use stays at the size of a few records.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::{BufReader, Read};
use std::sync::atomic::{AtomicUsize, Ordering};

use biasaudit_core::interchange::{Record, RecordReader};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Produces `total` NDJSON lines on demand without materializing them.
struct Lines {
    next: usize,
    total: usize,
    pending: Vec<u8>,
    pos: usize,
}

impl Read for Lines {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        if self.pos == self.pending.len() {
            if self.next == self.total {
                return Ok(0);
            }
            self.pending.clear();
            self.pos = 0;
            let i = self.next;
            let line = match i % 3 {
                0 => format!(
                    r#"{{"kind":"embedding","id":"e{i}","group":"A1","text":"w{i}","vector":[{}.5,-0.25,1e-3]}}"#,
                    i % 97
                ),
                1 => format!(
                    r#"{{"kind":"pll","id":"s{i}","pair_id":"p{i}","variant":"stereo","tokens":["he","ran"],"logprobs":[-1.5,-0.{}],"modified":[true,false]}}"#,
                    i % 89 + 1
                ),
                _ => format!(r#"{{"kind":"completion","prompt_id":"q{i}","completions":["a","b"]}}"#),
            };
            self.pending.extend_from_slice(line.as_bytes());
            self.pending.push(b'\n');
            self.next += 1;
        }
        let n = out.len().min(self.pending.len() - self.pos);
        out[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

#[test]
fn million_lines_in_constant_memory() {
    const TOTAL: usize = 1_000_000;
    let source = Lines {
        next: 0,
        total: TOTAL,
        pending: Vec::with_capacity(256),
        pos: 0,
    };
    let reader = RecordReader::new(BufReader::new(source));
    let baseline = LIVE.load(Ordering::Relaxed);
    PEAK.store(baseline, Ordering::Relaxed);

    let (mut count, mut embeddings, mut bytes_seen) = (0usize, 0usize, 0usize);
    for record in reader {
        let record = record.expect("generated lines are valid");
        if let Record::Embedding(e) = &record {
            embeddings += 1;
            bytes_seen += e.text.len();
        }
        count += 1;
    }

    let peak = PEAK.load(Ordering::Relaxed) - baseline;
    assert_eq!(count, TOTAL);
    assert_eq!(embeddings, TOTAL.div_ceil(3));
    assert!(bytes_seen > 0);
    // The input is roughly 100 MB; the reader should hold one line plus its
    // record and the 8 KiB read buffer.
    assert!(peak < 64 * 1024, "peak heap growth {peak} bytes");
}
