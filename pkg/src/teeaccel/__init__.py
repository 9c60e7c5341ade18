"""Executable model of a trusted AI accelerator."""
