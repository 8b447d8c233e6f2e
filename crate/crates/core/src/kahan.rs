use std::ops::AddAssign;

/// Compensated (Kahan) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    err: f64,
}

impl KahanSum {
    pub fn sum(&self) -> f64 {
        self.sum
    }
}

impl AddAssign<f64> for KahanSum {
    fn add_assign(&mut self, rhs: f64) {
        let y = rhs - self.err;
        let t = self.sum + y;
        self.err = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Elementwise compensated accumulator over fixed-length vectors.
#[derive(Debug, Clone)]
pub struct KahanVec {
    lanes: Vec<KahanSum>,
}

impl KahanVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            lanes: vec![KahanSum::default(); len],
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.lanes.len());
        for (lane, v) in self.lanes.iter_mut().zip(values) {
            *lane += *v;
        }
    }

    pub fn add_scaled(&mut self, values: &[f64], scale: f64) {
        debug_assert_eq!(values.len(), self.lanes.len());
        for (lane, v) in self.lanes.iter_mut().zip(values) {
            *lane += *v * scale;
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.lanes.iter().map(KahanSum::sum).collect()
    }
}

pub fn kahan_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut acc = KahanSum::default();
    for v in values {
        acc += *v;
    }
    acc.sum()
}
