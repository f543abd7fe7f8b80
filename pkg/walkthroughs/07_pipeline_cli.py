# %% [markdown]
# # The full pipeline from the command line
#
# Writes a self-contained 200-instance experiment (corpus, tiny encoder,
# fastText vectors, YAML) and drives it through ``npnprobe run-all`` twice.
# The second run reuses the cache and reproduces every output byte for byte.

# %%
import hashlib
import subprocess
import sys
import tempfile
from pathlib import Path

from npnprobe.synthetic import smoke_experiment

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
config = smoke_experiment(root)
print(config.read_text())


def digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode() + p.read_bytes())
    return h.hexdigest()


# %%
for attempt in (1, 2):
    subprocess.run([sys.executable, "-m", "npnprobe.cli", "run-all", str(config)], check=True)
    print(f"run {attempt}: outputs sha256 {digest(root / 'out')[:16]}")

# %%
for p in sorted((root / "out" / "figures").iterdir()):
    print(p.name)
