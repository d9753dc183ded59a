//! Demo; implemented later.
