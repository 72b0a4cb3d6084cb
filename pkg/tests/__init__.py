# -*- coding: utf-8 -*-
"""Test suite of fim-alchemy."""
