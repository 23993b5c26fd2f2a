"""Does a better caption score go with better downstream accuracy?

Feeds per-captioner Avg scores and one reasoner's accuracies to the
correlation report. The numbers here are made up for illustration.
Run: python3 demos/04_correlation.py
"""

import tempfile
from pathlib import Path

from capgeo.analysis import correlate, emit_report

caption_avg = {"cap-a": 45.0, "cap-b": 31.0, "cap-c": 36.5, "cap-d": 26.0}
accuracy = {"cap-a": 62.0, "cap-b": 50.5, "cap-c": 49.0, "cap-d": 41.5}

result = correlate(caption_avg, accuracy, "caption score vs accuracy")
print(f"pearson r = {result.r:.4f} over {len(result.points)} captioners")

with tempfile.TemporaryDirectory() as tmp:
    (path,) = emit_report([], [result], "markdown", Path(tmp), "demo")
    print(path.read_text())
