"""MSVL Toolkit: multispectral reconstruction, graph-attention models and evaluation."""
from __future__ import annotations

import dotenv
dotenv.load_dotenv()
