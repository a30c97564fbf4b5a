from setuptools import find_packages, setup

# The README.md will be used as the content for the PyPi package details page on the Python Package Index.
with open('README.md', 'r') as readme:
    long_description = readme.read()


setup(
    name='dispnet',
    version='0.3.0',
    description='Point-cloud completion with learned local displacement operators',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    python_requires='>=3.8,<4',
    install_requires=[
        'datadog>=0.36.0',
        'numpy>=1.20',
        'plyfile>=0.7.4',
        'pydantic~=1.10',
        'scipy>=1.6',
        'typing_extensions>=4.0',
    ],
    tests_require=[
        'pytest>=7.0',
    ],
    entry_points={
        'console_scripts': ['dispnet=dispnet.cli:main'],
    },
    include_package_data=True,
    packages=find_packages('src'),
    package_dir={'': 'src'},
    classifiers=[
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering',
    ]
)
