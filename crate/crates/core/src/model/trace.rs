use candle_core::Tensor;
use serde::{Deserialize, Serialize};

/// One module's input and output shapes in C x T x F notation (batch dropped).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub module: String,
    pub inputs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

/// Optional shape recorder threaded through the forward pass.
#[derive(Debug, Default)]
pub struct Tracer {
    rows: Option<Vec<ShapeRow>>,
}

impl Tracer {
    pub fn off() -> Self {
        Self { rows: None }
    }

    pub fn on() -> Self {
        Self { rows: Some(Vec::new()) }
    }

    pub fn record(&mut self, module: &str, inputs: &[Vec<usize>], output: Vec<usize>) {
        if let Some(rows) = &mut self.rows {
            rows.push(ShapeRow {
                module: module.to_string(),
                inputs: inputs.to_vec(),
                output,
            });
        }
    }

    pub fn rows(self) -> Vec<ShapeRow> {
        self.rows.unwrap_or_default()
    }
}

/// (B, T, F, C) -> [C, T, F].
pub fn ctf(x: &Tensor) -> Vec<usize> {
    let d = x.dims();
    vec![d[3], d[1], d[2]]
}
