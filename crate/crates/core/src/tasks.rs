//! Synthetic sequence tasks.
//!
//! Token layout shared by all tasks: ids `0..100` are two-digit numbers,
//! [`SEP`] separates them, [`BOS`] starts each sequence and ids from
//! [`FILLER_START`] up to the vocabulary end are instruction / haystack filler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::training::{Batch, DataSource};

pub const N_NUMBERS: usize = 100;
pub const SEP: usize = 100;
pub const BOS: usize = 101;
pub const FILLER_START: usize = 102;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PalindromeSpec {
    pub n_numbers: usize,
    pub instruction_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for PalindromeSpec {
    fn default() -> Self {
        Self { n_numbers: 8, instruction_len: 50, vocab_size: 128, seed: 0 }
    }
}

impl PalindromeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_numbers == 0 {
            return Err(Error::Config("n_numbers must be positive".into()));
        }
        if self.vocab_size <= FILLER_START {
            return Err(Error::Config(format!("vocab {} leaves no filler tokens", self.vocab_size)));
        }
        Ok(())
    }

    /// Number of tokens of one encoded example.
    pub fn seq_len(&self) -> usize {
        1 + 2 * (2 * self.n_numbers - 1) + self.instruction_len
    }

    /// Index of the first output number.
    pub fn output_start(&self) -> usize {
        1 + (2 * self.n_numbers - 1) + self.instruction_len
    }

    fn filler(&self, i: usize) -> usize {
        FILLER_START + i % (self.vocab_size - FILLER_START)
    }

    /// Encodes `numbers` as `BOS n1 SEP … nN <instruction> nN SEP … n1`
    /// with a mask over the output numbers and separators.
    pub fn encode(&self, numbers: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
        if numbers.len() != self.n_numbers || numbers.iter().any(|&n| n as usize >= N_NUMBERS) {
            return Err(Error::Input(format!("expected {} numbers below 100", self.n_numbers)));
        }
        let mut tokens = Vec::with_capacity(self.seq_len());
        tokens.push(BOS);
        push_separated(&mut tokens, numbers.iter().copied());
        tokens.extend((0..self.instruction_len).map(|i| self.filler(i)));
        let out_start = tokens.len();
        push_separated(&mut tokens, numbers.iter().rev().copied());
        let mask = (0..tokens.len()).map(|i| if i >= out_start { 1.0 } else { 0.0 }).collect();
        Ok((tokens, mask))
    }

    /// Recovers the input numbers from an encoded example, checking every
    /// structural token.
    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<u8>> {
        if tokens.len() != self.seq_len() || tokens[0] != BOS {
            return Err(Error::Input("not a palindrome example".into()));
        }
        let numbers: Vec<u8> = (0..self.n_numbers).map(|i| tokens[1 + 2 * i]).map(|t| t as u8).collect();
        let (expected, _) = self.encode(&numbers).map_err(|_| Error::Input("invalid number token".into()))?;
        if expected != tokens {
            return Err(Error::Input("example does not match the palindrome layout".into()));
        }
        Ok(numbers)
    }

    /// Target output numbers (the reversed input).
    pub fn target(numbers: &[u8]) -> Vec<u8> {
        numbers.iter().rev().copied().collect()
    }
}

fn push_separated(out: &mut Vec<usize>, numbers: impl Iterator<Item = u8>) {
    for (i, n) in numbers.enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.push(n as usize);
    }
}

/// `batch` fresh examples laid out `[batch, seq_len]` with their loss masks.
pub fn gen_palindrome_batch(spec: &PalindromeSpec, batch: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<f32>)> {
    spec.validate()?;
    let mut tokens = Vec::with_capacity(batch * spec.seq_len());
    let mut mask = Vec::with_capacity(batch * spec.seq_len());
    for _ in 0..batch {
        let numbers: Vec<u8> = (0..spec.n_numbers).map(|_| rng.below(N_NUMBERS) as u8).collect();
        let (t, m) = spec.encode(&numbers)?;
        tokens.extend(t);
        mask.extend(m);
    }
    Ok((tokens, mask))
}

/// Output NLL of a model that predicts separators perfectly and numbers
/// uniformly: `N · ln 100 / (2N − 1)`.
pub fn chance_nll(spec: &PalindromeSpec) -> f32 {
    let n = spec.n_numbers as f64;
    (n * (N_NUMBERS as f64).ln() / (2.0 * n - 1.0)) as f32
}

/// Endless stream of palindrome batches.
#[derive(Debug, Clone)]
pub struct PalindromeSource {
    pub spec: PalindromeSpec,
}

impl DataSource for PalindromeSource {
    fn next_batch(&mut self, batch: usize, rng: &mut Rng) -> Result<Batch> {
        let (tokens, mask) = gen_palindrome_batch(&self.spec, batch, rng)?;
        Batch::from_sequences(&tokens, &mask, batch)
    }
}

/// `BOS x1 … xN SEP x1 … xN`; loss on the copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopySpec {
    pub n_numbers: usize,
}

impl CopySpec {
    pub fn seq_len(&self) -> usize {
        2 * self.n_numbers + 2
    }
}

pub fn gen_copy_batch(spec: &CopySpec, batch: usize, rng: &mut Rng) -> (Vec<usize>, Vec<f32>) {
    let (mut tokens, mut mask) = (Vec::new(), Vec::new());
    for _ in 0..batch {
        let xs: Vec<usize> = (0..spec.n_numbers).map(|_| rng.below(N_NUMBERS)).collect();
        tokens.push(BOS);
        tokens.extend(&xs);
        tokens.push(SEP);
        tokens.extend(&xs);
        mask.extend(std::iter::repeat(0.0).take(spec.n_numbers + 2));
        mask.extend(std::iter::repeat(1.0).take(spec.n_numbers));
    }
    (tokens, mask)
}

impl DataSource for CopySpec {
    fn next_batch(&mut self, batch: usize, rng: &mut Rng) -> Result<Batch> {
        let (t, m) = gen_copy_batch(self, batch, rng);
        Batch::from_sequences(&t, &m, batch)
    }
}

/// Filler haystack with one `SEP value` needle; the sequence ends with
/// `SEP value` again and only that final value carries loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedleSpec {
    pub haystack_len: usize,
    pub vocab_size: usize,
}

impl NeedleSpec {
    pub fn seq_len(&self) -> usize {
        self.haystack_len + 5
    }
}

pub fn gen_needle_batch(spec: &NeedleSpec, batch: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<f32>)> {
    if spec.vocab_size <= FILLER_START {
        return Err(Error::Config("needle task needs filler tokens".into()));
    }
    let n_filler = spec.vocab_size - FILLER_START;
    let (mut tokens, mut mask) = (Vec::new(), Vec::new());
    for _ in 0..batch {
        let value = rng.below(N_NUMBERS);
        let at = rng.below(spec.haystack_len + 1);
        tokens.push(BOS);
        for i in 0..=spec.haystack_len {
            if i == at {
                tokens.extend([SEP, value]);
            }
            if i < spec.haystack_len {
                tokens.push(FILLER_START + rng.below(n_filler));
            }
        }
        tokens.extend([SEP, value]);
        mask.extend(std::iter::repeat(0.0).take(spec.seq_len() - 1));
        mask.push(1.0);
    }
    Ok((tokens, mask))
}
