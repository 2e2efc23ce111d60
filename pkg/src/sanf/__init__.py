"""sanf: semantic-aware neural fields.

A grid-based radiance field trained from analytic test scenes, a pluggable
semantic feature field distilled from a frozen perception model, interactive
mask decoding, mesh extraction with vote-based selection, and an HTTP service
exposing the whole pipeline to a browser client.
"""

__version__ = "0.1.0"
