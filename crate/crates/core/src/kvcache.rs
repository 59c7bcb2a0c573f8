//! Decode-time paged KV cache.
//!
//! Every (layer, kv head) stream keeps a ring of the last `w` entries, each
//! with the gate decision made when it was written. When an entry falls out
//! of the ring it is copied into the stream's long-term pages if its gate was
//! open, otherwise dropped. Long-term pages come from one shared [`PagePool`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::model::{AttentionKind, Model};
use crate::tape::{matmul_into, silu};

/// Fixed-size pages of `(key, value)` rows shared by all streams.
#[derive(Debug, Clone)]
pub struct PagePool {
    page_size: usize,
    d_head: usize,
    storage: Vec<f32>,
    free: Vec<usize>,
    owner: Vec<Option<usize>>,
    growable: bool,
    grows: usize,
}

impl PagePool {
    pub fn new(page_size: usize, d_head: usize, pages: usize, growable: bool) -> Result<Self> {
        if page_size == 0 || d_head == 0 {
            return Err(Error::Config("page size and head width must be positive".into()));
        }
        let mut pool = Self { page_size, d_head, storage: Vec::new(), free: Vec::new(), owner: Vec::new(), growable, grows: 0 };
        pool.add_pages(pages);
        pool.grows = 0;
        Ok(pool)
    }

    fn page_floats(&self) -> usize {
        self.page_size * 2 * self.d_head
    }

    fn add_pages(&mut self, n: usize) {
        let old = self.owner.len();
        self.storage.resize((old + n) * self.page_floats(), 0.0);
        self.owner.resize(old + n, None);
        // Lowest page ids are handed out first.
        self.free.extend((old..old + n).rev());
        self.grows += 1;
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity(&self) -> usize {
        self.owner.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_pages(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    /// Number of times the pool was enlarged.
    pub fn grows(&self) -> usize {
        self.grows
    }

    /// Enlarges the pool (doubling, at least `min_free` free pages) when
    /// growth is enabled.
    pub fn ensure_free(&mut self, min_free: usize) -> Result<()> {
        if self.free.len() >= min_free {
            return Ok(());
        }
        if !self.growable {
            return Err(Error::Capacity(format!("{} free pages, {} needed, growth disabled", self.free.len(), min_free)));
        }
        let extra = self.capacity().max(min_free - self.free.len());
        self.add_pages(extra);
        Ok(())
    }

    pub fn alloc(&mut self, stream: usize) -> Result<usize> {
        if self.free.is_empty() {
            self.ensure_free(1)?;
        }
        let page = self.free.pop().expect("ensured above");
        debug_assert!(self.owner[page].is_none());
        self.owner[page] = Some(stream);
        Ok(page)
    }

    pub fn release(&mut self, page: usize) {
        if self.owner[page].take().is_some() {
            self.free.push(page);
        }
    }

    pub fn owner(&self, page: usize) -> Option<usize> {
        self.owner[page]
    }

    fn row(&self, page: usize, slot: usize) -> usize {
        page * self.page_floats() + slot * 2 * self.d_head
    }

    fn write(&mut self, page: usize, slot: usize, k: &[f32], v: &[f32]) {
        let (o, d) = (self.row(page, slot), self.d_head);
        self.storage[o..o + d].copy_from_slice(k);
        self.storage[o + d..o + 2 * d].copy_from_slice(v);
    }

    pub fn key(&self, page: usize, slot: usize) -> &[f32] {
        let o = self.row(page, slot);
        &self.storage[o..o + self.d_head]
    }

    pub fn value(&self, page: usize, slot: usize) -> &[f32] {
        let o = self.row(page, slot) + self.d_head;
        &self.storage[o..o + self.d_head]
    }
}

const INITIAL_INDEX_CAPACITY: usize = 4;

/// One (layer, kv head) stream.
#[derive(Debug, Clone)]
pub struct HeadCache {
    stream: usize,
    window: usize,
    d_head: usize,
    /// Index array with headroom; only the first `used_pages` entries are live.
    page_indices: Box<[usize]>,
    used_pages: usize,
    used_slots_in_last_page: usize,
    index_grows: usize,
    ring_k: Vec<f32>,
    ring_v: Vec<f32>,
    ring_z: Vec<bool>,
    ring_pos: Vec<usize>,
    write_ptr: usize,
    filled: usize,
    retained_count: usize,
    retained_positions: Vec<usize>,
}

impl HeadCache {
    pub fn new(stream: usize, window: usize, d_head: usize) -> Self {
        Self {
            stream,
            window,
            d_head,
            page_indices: vec![0; INITIAL_INDEX_CAPACITY].into_boxed_slice(),
            used_pages: 0,
            used_slots_in_last_page: 0,
            index_grows: 0,
            ring_k: vec![0.0; window * d_head],
            ring_v: vec![0.0; window * d_head],
            ring_z: vec![false; window],
            ring_pos: vec![0; window],
            write_ptr: 0,
            filled: 0,
            retained_count: 0,
            retained_positions: Vec::new(),
        }
    }

    pub fn retained_count(&self) -> usize {
        self.retained_count
    }

    /// Positions held in the long-term region, in eviction order.
    pub fn retained_positions(&self) -> &[usize] {
        &self.retained_positions
    }

    /// Positions currently in the window ring, oldest first.
    pub fn window_positions(&self) -> Vec<usize> {
        let start = if self.filled < self.window { 0 } else { self.write_ptr };
        (0..self.filled).map(|i| self.ring_pos[(start + i) % self.window]).collect()
    }

    pub fn used_pages(&self) -> usize {
        self.used_pages
    }

    pub fn index_capacity(&self) -> usize {
        self.page_indices.len()
    }

    pub fn index_grows(&self) -> usize {
        self.index_grows
    }

    pub fn window_len(&self) -> usize {
        self.filled
    }

    /// Slots still writable without a new index entry.
    pub fn index_headroom(&self) -> usize {
        self.page_indices.len() - self.used_pages
    }

    fn grow_index(&mut self) {
        let mut bigger = vec![0; self.page_indices.len() * 2].into_boxed_slice();
        bigger[..self.used_pages].copy_from_slice(&self.page_indices[..self.used_pages]);
        self.page_indices = bigger;
        self.index_grows += 1;
    }

    fn ensure_index_headroom(&mut self) {
        if self.index_headroom() == 0 {
            self.grow_index();
        }
    }

    fn push_long_term(&mut self, pool: &mut PagePool, slot: usize) -> Result<()> {
        if self.used_pages == 0 || self.used_slots_in_last_page == pool.page_size() {
            self.ensure_index_headroom();
            let page = pool.alloc(self.stream)?;
            self.page_indices[self.used_pages] = page;
            self.used_pages += 1;
            self.used_slots_in_last_page = 0;
        }
        let page = self.page_indices[self.used_pages - 1];
        let d = self.d_head;
        pool.write(page, self.used_slots_in_last_page, &self.ring_k[slot * d..(slot + 1) * d], &self.ring_v[slot * d..(slot + 1) * d]);
        self.used_slots_in_last_page += 1;
        self.retained_count += 1;
        self.retained_positions.push(self.ring_pos[slot]);
        Ok(())
    }

    /// Writes a new entry into the ring; a displaced entry moves to the
    /// long-term pages if its gate was open.
    pub fn append(&mut self, pool: &mut PagePool, position: usize, k: &[f32], v: &[f32], z: bool) -> Result<()> {
        let d = self.d_head;
        if k.len() != d || v.len() != d {
            return Err(Error::Shape(format!("key/value rows of {} / {} for head width {d}", k.len(), v.len())));
        }
        let slot = self.write_ptr;
        if self.filled == self.window && self.ring_z[slot] {
            self.push_long_term(pool, slot)?;
        }
        self.ring_k[slot * d..(slot + 1) * d].copy_from_slice(k);
        self.ring_v[slot * d..(slot + 1) * d].copy_from_slice(v);
        self.ring_z[slot] = z;
        self.ring_pos[slot] = position;
        self.write_ptr = (slot + 1) % self.window;
        self.filled = (self.filled + 1).min(self.window);
        Ok(())
    }

    /// Visits every visible `(key, value)` in position order: long-term
    /// entries, then the ring oldest first.
    pub fn for_each_visible(&self, pool: &PagePool, mut f: impl FnMut(&[f32], &[f32])) {
        for p in 0..self.used_pages {
            let page = self.page_indices[p];
            let slots = if p + 1 == self.used_pages { self.used_slots_in_last_page } else { pool.page_size() };
            for s in 0..slots {
                f(pool.key(page, s), pool.value(page, s));
            }
        }
        let d = self.d_head;
        let start = if self.filled < self.window { 0 } else { self.write_ptr };
        for i in 0..self.filled {
            let slot = (start + i) % self.window;
            f(&self.ring_k[slot * d..(slot + 1) * d], &self.ring_v[slot * d..(slot + 1) * d]);
        }
    }

    pub fn visible_len(&self) -> usize {
        self.retained_count + self.filled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub bytes_window: u64,
    pub bytes_longterm: u64,
    /// Mean over streams of retained / max(n - w, 1) for `n` tokens seen.
    pub density: f64,
    pub pages_used: usize,
    pub retained: usize,
    /// Largest number of index-array reallocations of any stream.
    pub headroom_grows: usize,
    pub headroom_grows_total: usize,
    pub pool_grows: usize,
}

/// One gate decision as made at write time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateEvent {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub u: f32,
    pub z: bool,
}

pub fn write_gate_trace(events: &[GateEvent], out: &mut impl Write) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_gate_trace(text: &str) -> Result<Vec<GateEvent>> {
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub page_size: usize,
    pub initial_pages: usize,
    pub growable: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { page_size: 16, initial_pages: 64, growable: true }
    }
}

/// Incremental decoding state for one generation stream.
#[derive(Debug, Clone)]
pub struct DecodeState<'m> {
    model: &'m Model,
    window: usize,
    tau: f32,
    pool: PagePool,
    caches: Vec<Vec<HeadCache>>,
    t: usize,
    steps_until_check: usize,
    record_trace: bool,
    trace: Vec<GateEvent>,
}

fn rms_norm_row(x: &[f32], w: &[f32], eps: f32) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(v, g)| v * r * g).collect()
}

fn matvec(x: &[f32], w: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; n];
    matmul_into(x, w, &mut out, 1, x.len(), n, false);
    out
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m Model, gate: &GateConfig, cache: CacheConfig) -> Result<Self> {
        gate.validate()?;
        let c = &model.config;
        let pool = PagePool::new(cache.page_size, c.d_head, cache.initial_pages, cache.growable)?;
        let caches = (0..c.n_layers)
            .map(|l| (0..c.n_kv_heads).map(|k| HeadCache::new(l * c.n_kv_heads + k, gate.window, c.d_head)).collect())
            .collect();
        Ok(Self { model, window: gate.window, tau: gate.tau, pool, caches, t: 0, steps_until_check: 0, record_trace: false, trace: Vec::new() })
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn position(&self) -> usize {
        self.t
    }

    pub fn pool(&self) -> &PagePool {
        &self.pool
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache {
        &self.caches[layer][kv_head]
    }

    pub fn trace(&self) -> &[GateEvent] {
        &self.trace
    }

    fn n_streams(&self) -> usize {
        self.caches.iter().map(Vec::len).sum()
    }

    /// Capacity check done once every `page_size` steps: each stream gains at
    /// most one long-term entry per step, so one free page and one free index
    /// slot per stream cover the next `page_size` appends.
    fn safe_step_check(&mut self) -> Result<()> {
        if self.steps_until_check > 0 {
            self.steps_until_check -= 1;
            return Ok(());
        }
        let needed = self.n_streams();
        if self.pool.free_pages() < needed && self.pool.growable {
            self.pool.ensure_free(needed)?;
        }
        for h in self.caches.iter_mut().flatten() {
            h.ensure_index_headroom();
        }
        self.steps_until_check = self.pool.page_size() - 1;
        Ok(())
    }

    /// Direct append into one stream (bypassing the model).
    pub fn append_token(&mut self, layer: usize, head: usize, k_row: &[f32], v_row: &[f32], z: bool) -> Result<()> {
        let position = self.t;
        self.caches[layer][head].append(&mut self.pool, position, k_row, v_row, z)
    }

    /// Advances the position counter after direct appends.
    pub fn advance(&mut self) -> Result<()> {
        self.safe_step_check()?;
        self.t += 1;
        Ok(())
    }

    /// Runs one position through the model and returns next-token logits.
    pub fn decode_step(&mut self, token: usize) -> Result<Vec<f32>> {
        let model = self.model;
        let c = &model.config;
        if self.t >= c.max_seq_len {
            return Err(Error::Input(format!("position {} beyond max_seq_len {}", self.t, c.max_seq_len)));
        }
        if token >= c.vocab_size {
            return Err(Error::Input(format!("token {token} outside vocabulary of {}", c.vocab_size)));
        }
        self.safe_step_check()?;
        let (d, dh, hq, hkv, groups) = (c.d_model, c.d_head, c.n_q_heads, c.n_kv_heads, c.groups());
        let pos = self.t;
        let rope = model.rope().clone();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = model.embed.data()[token * d..(token + 1) * d].to_vec();
        for (l, lp) in model.layers.iter().enumerate() {
            let h = rms_norm_row(&x, lp.attn_norm.data(), c.norm_eps);
            let mut q = matvec(&h, lp.wq.data(), hq * dh);
            let mut k = matvec(&h, lp.wk.data(), hkv * dh);
            let v = matvec(&h, lp.wv.data(), hkv * dh);
            for head in q.chunks_mut(dh).chain(k.chunks_mut(dh)) {
                rope.rotate(head, pos);
            }
            let u = if c.layer_uses_gates(l) { Some(lp.predictor.predict_row(&h)) } else { None };
            for kv in 0..hkv {
                let (z, uval) = match c.head_kind(l, kv) {
                    AttentionKind::Global => (true, 1.0),
                    AttentionKind::SlidingWindowOnly => (false, 0.0),
                    AttentionKind::SelfPrunedKV => {
                        let uv = u.as_ref().expect("gated layer")[kv];
                        (uv >= self.tau, uv)
                    }
                };
                if self.record_trace {
                    self.trace.push(GateEvent { layer: l, head: kv, position: pos, u: uval, z });
                }
                self.caches[l][kv].append(&mut self.pool, pos, &k[kv * dh..(kv + 1) * dh], &v[kv * dh..(kv + 1) * dh], z)?;
            }
            let mut o = vec![0.0; hq * dh];
            for qh in 0..hq {
                let cache = &self.caches[l][qh / groups];
                let qrow = &q[qh * dh..(qh + 1) * dh];
                let mut scores = Vec::with_capacity(cache.visible_len());
                cache.for_each_visible(&self.pool, |kr, _| {
                    scores.push(qrow.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale);
                });
                let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0;
                for s in &mut scores {
                    *s = (*s - m).exp();
                    denom += *s;
                }
                let orow = &mut o[qh * dh..(qh + 1) * dh];
                let mut i = 0;
                cache.for_each_visible(&self.pool, |_, vr| {
                    let p = scores[i] / denom;
                    for (acc, val) in orow.iter_mut().zip(vr) {
                        *acc += p * val;
                    }
                    i += 1;
                });
            }
            let attn = matvec(&o, lp.wo.data(), d);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let h = rms_norm_row(&x, lp.ffn_norm.data(), c.norm_eps);
            let f: Vec<f32> = matvec(&h, lp.w1.data(), c.d_ffn).into_iter().map(silu).collect();
            let f = matvec(&f, lp.w2.data(), d);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let x = rms_norm_row(&x, model.final_norm.data(), c.norm_eps);
        let mut logits = vec![0.0; c.vocab_size];
        matmul_into(&x, model.embed.data(), &mut logits, 1, d, c.vocab_size, true);
        self.t += 1;
        Ok(logits)
    }

    pub fn memory_report(&self) -> MemoryReport {
        let bytes_per_token = (self.model.config.d_head * 2 * 4) as u64;
        let n = self.t;
        let mut rep = MemoryReport {
            bytes_window: 0,
            bytes_longterm: 0,
            density: 0.0,
            pages_used: 0,
            retained: 0,
            headroom_grows: 0,
            headroom_grows_total: 0,
            pool_grows: self.pool.grows(),
        };
        let streams = self.n_streams().max(1);
        for h in self.caches.iter().flatten() {
            rep.bytes_window += h.window_len() as u64 * bytes_per_token;
            rep.pages_used += h.used_pages();
            rep.retained += h.retained_count();
            rep.density += h.retained_count() as f64 / (n.saturating_sub(self.window)).max(1) as f64;
            rep.headroom_grows = rep.headroom_grows.max(h.index_grows());
            rep.headroom_grows_total += h.index_grows();
        }
        rep.bytes_longterm = (rep.pages_used * self.pool.page_size()) as u64 * bytes_per_token;
        rep.density /= streams as f64;
        rep
    }

    /// Checks page conservation and per-stream ownership.
    pub fn check_invariants(&self) -> Result<()> {
        let ps = self.pool.page_size();
        let rep = self.memory_report();
        let streams = self.n_streams();
        let upper = (rep.pages_used * ps) as i64;
        let lower = (rep.pages_used as i64 - streams as i64) * ps as i64;
        let retained = rep.retained as i64;
        if !(upper >= retained && retained > lower) {
            return Err(Error::Contract(format!("page conservation broken: {} pages for {} retained", rep.pages_used, rep.retained)));
        }
        if self.pool.allocated_pages() + self.pool.free_pages() != self.pool.capacity() {
            return Err(Error::Contract("allocated + free pages differ from pool capacity".into()));
        }
        for h in self.caches.iter().flatten() {
            for &p in &h.page_indices[..h.used_pages] {
                if self.pool.owner(p) != Some(h.stream) {
                    return Err(Error::Contract(format!("page {p} not owned by stream {}", h.stream)));
                }
            }
            if h.window_len() != self.t.min(self.window) {
                return Err(Error::Contract("window ring does not hold the most recent tokens".into()));
            }
            let expected_pages = h.retained_count().div_ceil(ps);
            if h.used_pages() != expected_pages {
                return Err(Error::Contract("stream holds a partially unused page".into()));
            }
        }
        Ok(())
    }
}
