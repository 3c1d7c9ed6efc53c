use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} is empty")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn check_finite<'a, I>(what: &'static str, values: I) -> Result<()>
where
    I: IntoIterator<Item = &'a num_complex::Complex32>,
{
    for (index, v) in values.into_iter().enumerate() {
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(CoreError::NonFinite { what, index });
        }
    }
    Ok(())
}
