import os
from setuptools import setup

here = os.path.abspath(os.path.dirname(__file__))
README = open(os.path.join(here, 'README.rst')).read()
NEWS = open(os.path.join(here, 'NEWS.rst')).read()

version = '0.1.0'

install_requires = ["numpy", "scipy", "librosa", "nltk", "pyaml", "PyYAML", "tqdm",
                    "threadpoolctl"]


def gen_data_files(src_dir):
    """
    lists the files below ``src_dir`` relative to its parent directory, as
    expected by the ``package_data`` parameter of ``setuptools.setup``.

    Parameters
    ----------
    src_dir : str
        (relative) path of a data directory inside the package

    Returns
    -------
    fpaths : list(str)
    """
    base = os.path.dirname(src_dir)
    return [os.path.relpath(os.path.join(root, fname), base)
            for root, _dirs, files in os.walk(src_dir)
            for fname in files]


setup(name='mixertts',
    version=version,
    description="non-autoregressive text-to-mel-spectrogram synthesis with MLP-Mixer blocks",
    long_description=README + '\n\n' + NEWS,
    classifiers=[c.strip() for c in """
        Development Status :: 3 - Alpha
        License :: OSI Approved :: GNU General Public License v3 (GPLv3)
        Operating System :: OS Independent
        Programming Language :: Python :: 3
        Topic :: Multimedia :: Sound/Audio :: Speech
        Topic :: Scientific/Engineering :: Artificial Intelligence
    """.split('\n') if c.strip()],
    keywords='speech synthesis tts mel-spectrogram mlp-mixer',
    license='GPL Version 3',
    packages=['mixertts'],
    package_dir={'mixertts': "src/mixertts"},
    package_data={'mixertts': gen_data_files('src/mixertts/data')},
    zip_safe=False,
    python_requires='>=3.8',
    install_requires=install_requires,
    extras_require={
        'tests': ['pytest'],
        'docs': ['sphinx', 'sphinxcontrib-napoleon'],
    },
    entry_points={
        'console_scripts':
            ['mixertts=mixertts.cli:main']
    }
)
