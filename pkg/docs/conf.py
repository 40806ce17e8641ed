# -*- coding: utf-8 -*-
#
# mixertts documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os
import sys

# the package lives in ../src
sys.path.insert(0, os.path.abspath(os.path.join('..', 'src')))

import mixertts

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinxcontrib.napoleon',
    'sphinx.ext.doctest',
    'sphinx.ext.coverage',
    'sphinx.ext.viewcode'
]

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'mixertts'
copyright = u'2026, the mixertts developers'

version = mixertts.__version__
release = mixertts.__version__

exclude_patterns = ['_build']
pygments_style = 'sphinx'

# -- Options for HTML output ----------------------------------------------

html_theme = 'default'
html_static_path = ['_static']
htmlhelp_basename = 'mixerttsdoc'

# -- Options for LaTeX output ---------------------------------------------

latex_documents = [
  ('index', 'mixertts.tex', u'mixertts Documentation',
   u'the mixertts developers', 'manual'),
]

# -- Options for manual page output ---------------------------------------

man_pages = [
    ('index', 'mixertts', u'mixertts Documentation',
     [u'the mixertts developers'], 1)
]
