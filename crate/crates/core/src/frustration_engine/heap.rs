/// Binary min-heap over node indices keyed by a mutable `f64` score.
///
/// Ties are broken by the lower node index, so the top is the lexicographic
/// minimum of `(key, node)`.
pub(crate) struct IndexedMinHeap {
    heap: Vec<u32>,
    slot: Vec<u32>,
    keys: Vec<f64>,
}

impl IndexedMinHeap {
    pub(crate) fn new(keys: &[f64]) -> Self {
        let n = keys.len();
        let mut h = Self {
            heap: (0..n as u32).collect(),
            slot: (0..n as u32).collect(),
            keys: keys.to_vec(),
        };
        for pos in (0..n / 2).rev() {
            h.sift_down(pos);
        }
        h
    }

    pub(crate) fn peek(&self) -> Option<(usize, f64)> {
        self.heap
            .first()
            .map(|&v| (v as usize, self.keys[v as usize]))
    }

    pub(crate) fn update(&mut self, node: usize, key: f64) {
        let old = self.keys[node];
        self.keys[node] = key;
        let pos = self.slot[node] as usize;
        if key < old {
            self.sift_up(pos);
        } else {
            self.sift_down(pos);
        }
    }

    fn less(&self, a: u32, b: u32) -> bool {
        let (ka, kb) = (self.keys[a as usize], self.keys[b as usize]);
        ka < kb || (ka == kb && a < b)
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.slot[self.heap[i] as usize] = i as u32;
        self.slot[self.heap[j] as usize] = j as u32;
    }

    fn sift_up(&mut self, mut pos: usize) {
        while pos > 0 {
            let parent = (pos - 1) / 2;
            if self.less(self.heap[pos], self.heap[parent]) {
                self.swap(pos, parent);
                pos = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut pos: usize) {
        let n = self.heap.len();
        loop {
            let left = 2 * pos + 1;
            if left >= n {
                break;
            }
            let right = left + 1;
            let child = if right < n && self.less(self.heap[right], self.heap[left]) {
                right
            } else {
                left
            };
            if self.less(self.heap[child], self.heap[pos]) {
                self.swap(pos, child);
                pos = child;
            } else {
                break;
            }
        }
    }
}
