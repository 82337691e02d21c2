"""Semi-supervised, subject-independent EEG motor-imagery classification."""

__version__ = "0.1.0"
