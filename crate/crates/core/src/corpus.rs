use crate::{Result, Schedule, VcqError};

/// `N` token sequences of length `L`, optionally class-labelled.
///
/// Tokens are stored row-major; row `i` is sequence `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCorpus {
    length: usize,
    k_max: u32,
    tokens: Vec<u32>,
    labels: Option<Vec<u32>>,
}

impl TokenCorpus {
    pub fn new(
        length: usize,
        k_max: u32,
        tokens: Vec<u32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if length == 0 || length > u16::MAX as usize {
            return Err(VcqError::Input(format!("sequence length {length} not in 1..=65535")));
        }
        if k_max == 0 {
            return Err(VcqError::Input("k_max must be at least 1".into()));
        }
        if tokens.is_empty() || !tokens.len().is_multiple_of(length) {
            return Err(VcqError::Shape(format!(
                "{} tokens do not form a non-empty set of rows of length {length}",
                tokens.len()
            )));
        }
        if let Some(pos) = tokens.iter().position(|&x| x >= k_max) {
            return Err(VcqError::Range(format!(
                "token {} at row {} position {} is not below k_max {k_max}",
                tokens[pos],
                pos / length,
                pos % length
            )));
        }
        let n = tokens.len() / length;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(VcqError::Shape(format!("{} labels for {n} sequences", l.len())));
            }
        }
        Ok(TokenCorpus { length, k_max, tokens, labels })
    }

    pub fn from_rows<R: AsRef<[u32]>>(
        rows: &[R],
        k_max: u32,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let length = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != length) {
            return Err(VcqError::Shape("rows have different lengths".into()));
        }
        let tokens = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(length, k_max, tokens, labels)
    }

    pub fn n_samples(&self) -> usize {
        self.tokens.len() / self.length
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.length..(i + 1) * self.length]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u32> {
        self.tokens.chunks_exact(self.length)
    }

    #[inline]
    pub fn token(&self, row: usize, t: usize) -> u32 {
        self.tokens[row * self.length + t]
    }

    /// Checks the corpus against a schedule: same length and every token
    /// below its position's `K_t`.
    pub fn check_schedule(&self, schedule: &Schedule) -> Result<()> {
        if schedule.length() != self.length {
            return Err(VcqError::Shape(format!(
                "corpus length {} but schedule length {}",
                self.length,
                schedule.length()
            )));
        }
        let sizes = schedule.sizes();
        for row in self.rows() {
            for (t, (&x, &k)) in row.iter().zip(&sizes).enumerate() {
                if x >= k {
                    return Err(VcqError::CorpusMismatch { position: t, token: x, k_t: k });
                }
            }
        }
        Ok(())
    }
}
