//! Hand-rolled f64 network kernels: dense and LSTM layers with explicit
//! backward passes, squared-error loss, RMSprop, and seeded Glorot init.
//! Every backward pass is validated against central finite differences in the
//! module tests; the `gradcheck` helpers also back the user-facing command.

pub mod dense;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod lstm;
pub mod optim;
pub mod tensor;

pub use dense::{relu, relu_backward, Dense, DenseGrads};
pub use gradcheck::{numerical_grad, rel_err};
pub use init::glorot_uniform;
pub use loss::{batch_loss, sq_err, sq_err_grad};
pub use lstm::{LstmCell, LstmGrads, LstmTape};
pub use optim::RmsProp;
pub use tensor::Tensor2;
