//! Fixtures shared by the benchmarks.

use nbm::{NbmModel, NbmSpec, Tensor, VisibleKind};

/// Model with the shapes of the image experiments: 10 classes, 784 pixels.
pub fn image_model(n_h: usize) -> NbmModel<f32> {
    NbmModel::init(NbmSpec::standard(10, 784, n_h, VisibleKind::Gaussian, 32), 1).expect("valid spec")
}

/// One-hot labels cycling through the classes, and a deterministic visible
/// batch in `[-0.5, 0.5]`.
pub fn image_batch(rows: usize) -> (Tensor<f32>, Tensor<f32>) {
    let labels: Vec<usize> = (0..rows).map(|r| r % 10).collect();
    let x = nbm::data::one_hot(&labels, 10).expect("labels in range");
    let y: Vec<f32> = (0..rows * 784).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect();
    (x, Tensor::matrix(rows, 784, y).expect("shape"))
}
