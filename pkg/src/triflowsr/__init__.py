"""Reference-based super-resolution with a tri-branch rectified flow, at desk scale."""
