use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Classifies structural defects in serialized files (checkpoints, NIfTI,
/// raw volumes). Kept separate from `Error` so tests and callers can match
/// on the failure class without string inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatKind {
    BadMagic,
    UnsupportedVersion,
    UnsupportedDatatype,
    BadHeader,
    Truncated,
    SizeMismatch,
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FormatKind::BadMagic => "bad magic",
            FormatKind::UnsupportedVersion => "unsupported version",
            FormatKind::UnsupportedDatatype => "unsupported datatype",
            FormatKind::BadHeader => "bad header",
            FormatKind::Truncated => "truncated",
            FormatKind::SizeMismatch => "size mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub enum Error {
    /// Tensor or volume shapes are incompatible for the requested operation.
    Shape { context: &'static str, detail: String },
    /// A parameter or configuration value is out of its legal range.
    Invalid { context: &'static str, detail: String },
    /// A numeric result or input was NaN/inf where finite values are required.
    NonFinite { context: &'static str, detail: String },
    /// Underlying I/O failure, annotated with what was being accessed.
    Io { context: String, source: std::io::Error },
    /// A serialized file violates its format contract.
    Format { kind: FormatKind, detail: String },
}

impl Error {
    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Invalid { context, detail: detail.into() }
    }

    pub fn shape(context: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { context, detail: detail.into() }
    }

    pub fn non_finite(context: &'static str, detail: impl Into<String>) -> Error {
        Error::NonFinite { context, detail: detail.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io { context: context.into(), source }
    }

    pub fn format(kind: FormatKind, detail: impl Into<String>) -> Error {
        Error::Format { kind, detail: detail.into() }
    }

    pub fn format_kind(&self) -> Option<FormatKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => write!(f, "{context}: shape mismatch: {detail}"),
            Error::Invalid { context, detail } => write!(f, "{context}: invalid argument: {detail}"),
            Error::NonFinite { context, detail } => write!(f, "{context}: non-finite value: {detail}"),
            Error::Io { context, source } => write!(f, "{context}: io error: {source}"),
            Error::Format { kind, detail } => write!(f, "format error ({kind}): {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
