//! Holds the `acceptance` test target, which runs the full identification
//! and drying pipeline against its acceptance thresholds.
