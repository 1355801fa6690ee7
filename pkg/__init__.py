"""
fairtrans: bias mitigation for face recognition by cross-group image translation.

Everything runs on synthetic faces.
"""

__version__ = "0.1.0"
