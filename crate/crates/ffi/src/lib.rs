//! C ABI surface; filled in below.
