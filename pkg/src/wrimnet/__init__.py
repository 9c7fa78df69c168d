"""WRIM-Net: visible-infrared person re-identification with MIIM gates and AICL losses."""
